/**
 * Line-delimited JSON wire protocol shared with the explainability toolkit.
 *
 * One JSON object per line over stdio; pixels travel as base64 of
 * row-major 8-bit values (RGB interleaved for c=3). Unknown fields are
 * ignored. Every malformed request is answered with an error object and
 * the server stays alive.
 */

export interface WireImage {
  w: number;
  h: number;
  c: number;
  pix: string;
}

export interface PredictRequest {
  type: 'predict';
  id: number;
  images: WireImage[];
}

export interface HelloMessage {
  type: 'hello';
  classes: string[];
  input_size: [number, number];
}

export function helloLine(classes: string[], inputSize: [number, number]): string {
  const msg: HelloMessage = { type: 'hello', classes, input_size: inputSize };
  return JSON.stringify(msg);
}

export function probsLine(id: number, probs: number[][]): string {
  return JSON.stringify({ type: 'probs', id, probs });
}

export function errorLine(id: number, msg: string): string {
  return JSON.stringify({ type: 'error', id, msg });
}

/** Decode a wire image into float32 RGB pixels in [0, 1], shape [h, w, 3]. */
export function decodeImage(img: WireImage, expected: [number, number]): Float32Array {
  const { w, h, c } = img;
  if (!Number.isInteger(w) || !Number.isInteger(h) || (c !== 1 && c !== 3)) {
    throw new Error(`malformed image header w=${w} h=${h} c=${c}`);
  }
  if (w !== expected[0] || h !== expected[1]) {
    throw new Error(`image size ${w}x${h} does not match declared input ${expected[0]}x${expected[1]}`);
  }
  const raw = Buffer.from(img.pix, 'base64');
  if (raw.length !== w * h * c) {
    throw new Error(`image payload holds ${raw.length} bytes, expected ${w * h * c}`);
  }
  const out = new Float32Array(w * h * 3);
  if (c === 3) {
    for (let i = 0; i < raw.length; i++) out[i] = raw[i] / 255;
  } else {
    for (let i = 0; i < w * h; i++) {
      const v = raw[i] / 255;
      out[3 * i] = v;
      out[3 * i + 1] = v;
      out[3 * i + 2] = v;
    }
  }
  return out;
}

export function parseRequest(line: string): PredictRequest {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch {
    throw new Error(`invalid JSON: ${line.slice(0, 80)}`);
  }
  const req = obj as Partial<PredictRequest>;
  if (req.type !== 'predict') {
    throw new Error(`unsupported request type ${JSON.stringify(req.type)}`);
  }
  if (!Array.isArray(req.images)) {
    throw new Error('predict request carries no images array');
  }
  return { type: 'predict', id: Number(req.id ?? 0), images: req.images };
}
