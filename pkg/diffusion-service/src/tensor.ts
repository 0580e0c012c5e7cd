/**
 * Tensor payloads on the wire: raw little-endian float32, base64-encoded,
 * row-major, alongside an explicit shape and the dtype tag "f32le".
 */

export interface TensorPayload {
  shape: number[];
  dtype: string;
  data_b64: string;
}

const BASE64_RE = /^[A-Za-z0-9+/]*={0,2}$/;

export class PayloadError extends Error {
  constructor(public readonly field: string, detail: string) {
    super(`${field}: ${detail}`);
  }
}

export function elementCount(shape: number[]): number {
  return shape.reduce((acc, dim) => acc * dim, 1);
}

/** Decode and validate one tensor payload; `field` names it in errors. */
export function decodeTensor(payload: TensorPayload, field: string): Buffer {
  if (payload.dtype !== 'f32le') {
    throw new PayloadError(`${field}.dtype`, `unsupported dtype '${payload.dtype}'`);
  }
  if (payload.shape.length === 0 || payload.shape.some((d) => !Number.isInteger(d) || d < 1)) {
    throw new PayloadError(`${field}.shape`, 'dimensions must be positive integers');
  }
  const text = payload.data_b64;
  if (text.length % 4 !== 0 || !BASE64_RE.test(text)) {
    throw new PayloadError(`${field}.data_b64`, 'not valid base64');
  }
  const raw = Buffer.from(text, 'base64');
  const needed = elementCount(payload.shape) * 4;
  if (raw.length !== needed) {
    throw new PayloadError(
      `${field}.data_b64`,
      `holds ${raw.length} bytes, shape [${payload.shape.join(', ')}] needs ${needed}`,
    );
  }
  return raw;
}

export function encodeTensor(raw: Buffer, shape: number[]): TensorPayload {
  return { shape, dtype: 'f32le', data_b64: raw.toString('base64') };
}
