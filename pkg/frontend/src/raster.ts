/**
 * Stroke rasterization at native slice resolution.
 *
 * A stroke is an ordered list of pixel-space points. We stamp a disc brush
 * along the line joining consecutive points; with radius 1 the disc is a
 * single pixel, so a click marks exactly one pixel and a horizontal drag
 * marks a 1-px-high row. Everything lands on the slice grid the server
 * sees — no screen-space scaling here.
 */

export interface StrokePoint {
  r: number;
  c: number;
}

/** Paint a disc of the given radius centred on (r, c). Radius 1 = one pixel. */
function stampDisc(
  mask: Uint8Array,
  rows: number,
  cols: number,
  r: number,
  c: number,
  radius: number,
): void {
  const reach = radius - 1;
  const r2 = reach * reach;
  const rLo = Math.max(0, Math.ceil(r - reach));
  const rHi = Math.min(rows - 1, Math.floor(r + reach));
  for (let rr = rLo; rr <= rHi; rr++) {
    const dr = rr - r;
    const span = Math.sqrt(Math.max(0, r2 - dr * dr));
    const cLo = Math.max(0, Math.ceil(c - span));
    const cHi = Math.min(cols - 1, Math.floor(c + span));
    for (let cc = cLo; cc <= cHi; cc++) {
      mask[rr * cols + cc] = 1;
    }
  }
}

/**
 * Rasterize a stroke into a flat 0/1 mask of shape dims.
 *
 * Consecutive points are joined by dense linear interpolation (one stamp per
 * unit of the longer axis), so fast drags leave no gaps. Points outside the
 * slice are clipped, not rejected.
 */
export function rasterizeStroke(
  points: StrokePoint[],
  radius: number,
  dims: [number, number],
): Uint8Array {
  if (radius < 1) throw new Error(`brush radius must be >= 1, got ${radius}`);
  const [rows, cols] = dims;
  const mask = new Uint8Array(rows * cols);
  if (points.length === 0) return mask;

  const first = points[0]!;
  stampDisc(mask, rows, cols, Math.round(first.r), Math.round(first.c), radius);
  for (let i = 1; i < points.length; i++) {
    const a = points[i - 1]!;
    const b = points[i]!;
    const steps = Math.max(1, Math.ceil(Math.max(Math.abs(b.r - a.r), Math.abs(b.c - a.c))));
    for (let s = 1; s <= steps; s++) {
      const t = s / steps;
      const r = Math.round(a.r + (b.r - a.r) * t);
      const c = Math.round(a.c + (b.c - a.c) * t);
      stampDisc(mask, rows, cols, r, c, radius);
    }
  }
  return mask;
}

/** Union `src` into `dst` in place (both flat masks of equal length). */
export function mergeMask(dst: Uint8Array, src: Uint8Array): void {
  for (let i = 0; i < dst.length; i++) {
    if (src[i]) dst[i] = 1;
  }
}

/** Clear every `src` pixel from `dst` in place — the erase half of a stroke. */
export function clearMask(dst: Uint8Array, src: Uint8Array): void {
  for (let i = 0; i < dst.length; i++) {
    if (src[i]) dst[i] = 0;
  }
}
