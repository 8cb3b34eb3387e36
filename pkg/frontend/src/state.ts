/**
 * Viewer state and its pure transitions.
 *
 * State is a plain object; every transition returns a new object so the
 * rendering layer can diff by identity. Invariants enforced here: the slice
 * index always stays inside the volume along the current axis, and the
 * brush radius never drops below one pixel.
 */

import type { Axis, OverlayMode, Polarity, SessionInfo } from './types.js';

export interface WindowLevel {
  lo: number;
  hi: number;
}

export interface ViewerState {
  sessionId: string;
  dims: [number, number, number];
  axis: Axis;
  index: number;
  window: WindowLevel;
  activeClass: number;
  brushRadius: number;
  polarity: Polarity;
  overlay: OverlayMode;
  /** True once a scribble landed that refine has not consumed yet. */
  dirty: boolean;
  /** True while a mutating request is in flight. */
  busy: boolean;
}

const DEFAULT_WINDOW: WindowLevel = { lo: 0.0, hi: 1.0 };

/** Fresh state for a loaded session: axial middle slice, label overlay. */
export function createState(info: SessionInfo): ViewerState {
  const axis: Axis = 2;
  const firstClass = info.classes.length > 0 ? info.classes[0]!.class_id : 0;
  return {
    sessionId: info.id,
    dims: info.dims,
    axis,
    index: Math.floor(info.dims[axis] / 2),
    window: { ...DEFAULT_WINDOW },
    activeClass: firstClass,
    brushRadius: 3,
    polarity: 'add',
    overlay: 'labels',
    dirty: false,
    busy: false,
  };
}

function clampIndex(index: number, dims: [number, number, number], axis: Axis): number {
  const n = dims[axis];
  return Math.min(Math.max(0, Math.round(index)), n - 1);
}

export function setAxis(s: ViewerState, axis: Axis): ViewerState {
  // Re-centre rather than carrying an index that may be out of range.
  return { ...s, axis, index: Math.floor(s.dims[axis] / 2) };
}

export function setIndex(s: ViewerState, index: number): ViewerState {
  return { ...s, index: clampIndex(index, s.dims, s.axis) };
}

export function setBrush(s: ViewerState, radius: number): ViewerState {
  return { ...s, brushRadius: Math.max(1, Math.round(radius)) };
}

export function setPolarity(s: ViewerState, polarity: Polarity): ViewerState {
  return { ...s, polarity };
}

export function setActiveClass(s: ViewerState, classId: number): ViewerState {
  return { ...s, activeClass: classId };
}

export function setOverlay(s: ViewerState, overlay: OverlayMode): ViewerState {
  return { ...s, overlay };
}

export function markDirty(s: ViewerState): ViewerState {
  return s.dirty ? s : { ...s, dirty: true };
}

export function clearDirty(s: ViewerState): ViewerState {
  return s.dirty ? { ...s, dirty: false } : s;
}

/** Refine is offered only when there are unconsumed scribbles and no request in flight. */
export function canRefine(s: ViewerState): boolean {
  return s.dirty && !s.busy;
}

/** (rows, cols) of the 2-D slice seen when cutting along `axis`. */
export function sliceDims(dims: [number, number, number], axis: Axis): [number, number] {
  if (axis === 0) return [dims[1], dims[2]];
  if (axis === 1) return [dims[0], dims[2]];
  return [dims[0], dims[1]];
}

/**
 * Serializes mutating requests: at most one scribble/segment/refine in
 * flight at a time. GETs never go through the gate.
 */
export class MutationGate {
  private inFlight = false;

  get busy(): boolean {
    return this.inFlight;
  }

  async run<T>(op: () => Promise<T>): Promise<T> {
    if (this.inFlight) {
      throw new Error('mutating request already in flight');
    }
    this.inFlight = true;
    try {
      return await op();
    } finally {
      this.inFlight = false;
    }
  }
}
