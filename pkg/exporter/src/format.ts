/**
 * Binary tensor container writer.
 *
 * Layout (little-endian): magic "BWNH" | u8 version=1 | u8 dtype (0=F32,
 * 1=I8) | u8 ndim | u8 reserved | ndim x u32 dims | row-major payload.
 *
 * The exporter only writes this format; the Python package's reader is the
 * format authority and the cross-read test is the contract.
 */

export const MAGIC = Buffer.from('BWNH', 'ascii');
export const VERSION = 1;

export type Dtype = 'F32' | 'I8';

const DTYPE_CODES: Record<Dtype, number> = { F32: 0, I8: 1 };

export function encodeTensor(dtype: Dtype, dims: number[], payload: Float32Array | Int8Array): Buffer {
  if (dims.length < 1 || dims.length > 255) {
    throw new Error(`ndim must be in 1..255, got ${dims.length}`);
  }
  let count = 1;
  for (const d of dims) {
    if (!Number.isInteger(d) || d <= 0 || d > 0xffffffff) {
      throw new Error(`dims must be positive u32 values, got ${dims}`);
    }
    count *= d;
  }
  if (payload.length !== count) {
    throw new Error(`payload has ${payload.length} values, dims ${dims} imply ${count}`);
  }
  if (dtype === 'I8') {
    for (const v of payload) {
      if (v !== 1 && v !== -1) {
        throw new Error('invalid binary code: I8 payload must contain only -1 and +1');
      }
    }
  }
  const header = Buffer.alloc(8 + 4 * dims.length);
  MAGIC.copy(header, 0);
  header.writeUInt8(VERSION, 4);
  header.writeUInt8(DTYPE_CODES[dtype], 5);
  header.writeUInt8(dims.length, 6);
  header.writeUInt8(0, 7);
  dims.forEach((d, i) => header.writeUInt32LE(d, 8 + 4 * i));

  let body: Buffer;
  if (dtype === 'F32') {
    body = Buffer.alloc(4 * payload.length);
    const view = payload as Float32Array;
    for (let i = 0; i < view.length; i++) {
      body.writeFloatLE(view[i], 4 * i);
    }
  } else {
    body = Buffer.from(Int8Array.from(payload).buffer.slice(0));
  }
  return Buffer.concat([header, body]);
}
