import { NoisePredictionRequest } from './schema';
import { TensorPayload, decodeTensor, encodeTensor } from './tensor';

/**
 * A backend turns a validated noise-prediction request into the epsilon
 * tensor. `load` gates readiness: health reports 503 until it resolves.
 */
export interface NoiseBackend {
  readonly modelName: string;
  load(): Promise<void>;
  predict(request: NoisePredictionRequest): TensorPayload;
}

/** Ready immediately; returns z_t unchanged. Deterministic by construction. */
export class EchoBackend implements NoiseBackend {
  readonly modelName = 'echo';

  load(): Promise<void> {
    return Promise.resolve();
  }

  predict(request: NoisePredictionRequest): TensorPayload {
    const raw = decodeTensor(request.z_t, 'z_t');
    decodeTensor(request.condition, 'condition');
    return encodeTensor(raw, request.z_t.shape);
  }
}

/**
 * Placeholder for a real view-conditioned denoiser. No checkpoint ships
 * with this repository, so loading reports failure and the service stays
 * unavailable; health still names the configured identifier.
 */
export class ModelBackend implements NoiseBackend {
  constructor(
    readonly modelName: string,
    readonly guidanceScale: number,
  ) {}

  load(): Promise<void> {
    return Promise.reject(
      new Error(
        `no denoiser runtime is bundled for '${this.modelName}'; ` +
          'use --mode echo, or stand a real model behind this protocol',
      ),
    );
  }

  predict(_request: NoisePredictionRequest): TensorPayload {
    throw new Error(`model '${this.modelName}' is not loaded`);
  }
}
