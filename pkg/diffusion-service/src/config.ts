import { parseArgs } from 'node:util';

export type ServiceMode = 'model' | 'echo';

export interface ServiceConfig {
  host: string;
  port: number;
  mode: ServiceMode;
  modelId: string;
  guidanceScale: number;
  requestSizeLimit: string;
}

export const DEFAULTS: ServiceConfig = {
  host: '127.0.0.1',
  port: 8191,
  mode: 'echo',
  modelId: 'view-conditioned-denoiser',
  guidanceScale: 3.0,
  requestSizeLimit: '8mb',
};

export function parseConfig(argv: string[]): ServiceConfig {
  const { values } = parseArgs({
    args: argv,
    options: {
      host: { type: 'string' },
      port: { type: 'string' },
      mode: { type: 'string' },
      model: { type: 'string' },
      'guidance-scale': { type: 'string' },
      'request-limit': { type: 'string' },
    },
  });
  const mode = values.mode ?? DEFAULTS.mode;
  if (mode !== 'model' && mode !== 'echo') {
    throw new Error(`mode must be 'model' or 'echo', got '${mode}'`);
  }
  const port = values.port !== undefined ? Number(values.port) : DEFAULTS.port;
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`port must be an integer in [0, 65535], got '${values.port}'`);
  }
  const guidanceScale =
    values['guidance-scale'] !== undefined
      ? Number(values['guidance-scale'])
      : DEFAULTS.guidanceScale;
  if (!Number.isFinite(guidanceScale)) {
    throw new Error(`guidance scale must be a number, got '${values['guidance-scale']}'`);
  }
  return {
    host: values.host ?? DEFAULTS.host,
    port,
    mode,
    modelId: values.model ?? DEFAULTS.modelId,
    guidanceScale,
    requestSizeLimit: values['request-limit'] ?? DEFAULTS.requestSizeLimit,
  };
}
