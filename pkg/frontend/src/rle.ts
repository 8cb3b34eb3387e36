/**
 * Run-length coding for binary slice masks.
 *
 * The wire format is row-major over a 2-D slice: each run is
 * `[start, length]` with `start = row * cols + col`. Runs are emitted in
 * ascending order, never touch, and never cross the mask boundary — the
 * decoder rejects anything else.
 */

export interface RleMask {
  dims: [number, number];
  runs: [number, number][];
}

/** Encode a flat 0/1 mask (length rows*cols) into canonical runs. */
export function encodeRle(mask: Uint8Array, dims: [number, number]): RleMask {
  const [rows, cols] = dims;
  const n = rows * cols;
  if (mask.length !== n) {
    throw new Error(`mask length ${mask.length} != ${rows}x${cols}`);
  }
  const runs: [number, number][] = [];
  let i = 0;
  while (i < n) {
    if (!mask[i]) {
      i += 1;
      continue;
    }
    const start = i;
    while (i < n && mask[i]) i += 1;
    runs.push([start, i - start]);
  }
  return { dims: [rows, cols], runs };
}

/** Decode back to a flat mask; validates bounds and run lengths. */
export function decodeRle(rle: RleMask): Uint8Array {
  const [rows, cols] = rle.dims;
  const n = rows * cols;
  const mask = new Uint8Array(n);
  for (const run of rle.runs) {
    const [start, length] = run;
    if (!Number.isInteger(start) || !Number.isInteger(length) || length < 1) {
      throw new Error(`bad run [${start}, ${length}]`);
    }
    if (start < 0 || start + length > n) {
      throw new Error(`run [${start}, ${length}] out of bounds for ${rows}x${cols}`);
    }
    mask.fill(1, start, start + length);
  }
  return mask;
}
