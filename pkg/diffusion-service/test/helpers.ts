import { AddressInfo } from 'node:net';
import { Server } from 'node:http';
import { EchoBackend, NoiseBackend } from '../src/backend';
import { buildService } from '../src/app';
import { DEFAULTS, ServiceConfig } from '../src/config';
import { TensorPayload } from '../src/tensor';

export interface RunningService {
  baseUrl: string;
  close(): Promise<void>;
}

export async function startService(
  overrides: Partial<ServiceConfig> = {},
  backend: NoiseBackend = new EchoBackend(),
): Promise<RunningService> {
  const config: ServiceConfig = { ...DEFAULTS, ...overrides, port: 0 };
  const { app } = buildService(config, backend);
  const server: Server = await new Promise((resolve) => {
    const s = app.listen(0, '127.0.0.1', () => resolve(s));
  });
  const { port } = server.address() as AddressInfo;
  return {
    baseUrl: `http://127.0.0.1:${port}`,
    close: () => new Promise((resolve) => server.close(() => resolve())),
  };
}

/** Deterministic pseudo-random f32 tensor, values in [-1, 1). */
export function makeTensor(shape: number[], seed: number): TensorPayload {
  const count = shape.reduce((a, d) => a * d, 1);
  const values = new Float32Array(count);
  let state = seed >>> 0;
  for (let i = 0; i < count; i++) {
    state = (state * 1664525 + 1013904223) >>> 0;
    values[i] = state / 2147483648 - 1;
  }
  const raw = Buffer.from(values.buffer, values.byteOffset, values.byteLength);
  return { shape, dtype: 'f32le', data_b64: raw.toString('base64') };
}

export function makeRequest(shape: number[] = [256, 256, 3]): Record<string, unknown> {
  return {
    t: 480,
    delta_camera: { azimuth_deg: 135.0, elevation_deg: -10.0, radius: 0.0 },
    z_t: makeTensor(shape, 7),
    condition: makeTensor(shape, 11),
  };
}

export async function postJson(
  baseUrl: string,
  path: string,
  body: unknown,
): Promise<{ status: number; json: any }> {
  const resp = await fetch(baseUrl + path, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: typeof body === 'string' ? body : JSON.stringify(body),
  });
  return { status: resp.status, json: await resp.json() };
}
