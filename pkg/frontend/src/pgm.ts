/** Decode a binary PGM (P5, maxval 255 or 65535 big-endian) into floats 0..1. */

export interface DecodedImage {
  width: number;
  height: number;
  /** row-major, normalized to [0, 1] */
  data: Float32Array;
}

export function decodeBase64(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}

export function decodePgm(bytes: Uint8Array): DecodedImage {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error("not a binary PGM (P5)");
  }
  let pos = 2;
  const tokens: number[] = [];
  while (tokens.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    const token = textOf(bytes, start, pos);
    const value = Number(token);
    if (!Number.isFinite(value)) throw new Error(`bad PGM header token: ${token}`);
    tokens.push(value);
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = tokens;
  const n = width * height;
  const data = new Float32Array(n);
  if (maxval > 255) {
    if (bytes.length - pos < 2 * n) throw new Error("truncated 16-bit PGM payload");
    for (let i = 0; i < n; i++) {
      const hi = bytes[pos + 2 * i];
      const lo = bytes[pos + 2 * i + 1];
      data[i] = (hi * 256 + lo) / maxval;
    }
  } else {
    if (bytes.length - pos < n) throw new Error("truncated 8-bit PGM payload");
    for (let i = 0; i < n; i++) data[i] = bytes[pos + i] / maxval;
  }
  return { width, height, data };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x0a || b === 0x0d || b === 0x09;
}

function textOf(bytes: Uint8Array, start: number, end: number): string {
  let s = "";
  for (let i = start; i < end; i++) s += String.fromCharCode(bytes[i]);
  return s;
}
