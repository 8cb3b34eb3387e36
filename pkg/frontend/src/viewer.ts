/**
 * Orchestrates the slice viewer: session load, scribble capture, refine.
 *
 * Rendering is delegated to a SliceHost so this module stays DOM-free and
 * testable. The viewer owns the canonical state object plus a local
 * scribble layer per (class, axis, slice) that mirrors what the server has
 * accumulated — strokes are applied locally first (optimistic), then posted.
 */

import { ApiClient, ApiError, type ScribblePayload } from './api.js';
import { clearMask, mergeMask, rasterizeStroke, type StrokePoint } from './raster.js';
import { encodeRle } from './rle.js';
import {
  canRefine,
  clearDirty,
  createState,
  markDirty,
  MutationGate,
  setActiveClass,
  setAxis,
  setBrush,
  setIndex,
  setOverlay,
  setPolarity,
  sliceDims,
  type ViewerState,
} from './state.js';
import type { Axis, ClassEntry, OverlayMode, Polarity, SessionInfo } from './types.js';

/** Everything the viewer needs from the surrounding page. */
export interface SliceHost {
  showSlice(png: Uint8Array, state: ViewerState): void;
  showScribbleOverlay(mask: Uint8Array, dims: [number, number]): void;
  setClasses(classes: ClassEntry[]): void;
  setStatus(text: string): void;
  setError(text: string): void;
  setRefineEnabled(enabled: boolean): void;
}

function layerKey(classId: number, axis: Axis, index: number): string {
  return `${classId}:${axis}:${index}`;
}

export class Viewer {
  private state: ViewerState | null = null;
  private info: SessionInfo | null = null;
  private readonly layers = new Map<string, Uint8Array>();
  private readonly queued: ScribblePayload[] = [];
  private readonly gate = new MutationGate();

  constructor(
    private readonly api: ApiClient,
    private readonly host: SliceHost,
  ) {}

  /** Load a session and render its middle axial slice. 404 -> error panel. */
  async load(sessionId: string): Promise<void> {
    let info: SessionInfo;
    try {
      info = await this.api.getSession(sessionId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        this.host.setError(`session ${sessionId} not found`);
        return;
      }
      throw err;
    }
    this.info = info;
    this.state = createState(info);
    this.layers.clear();
    this.host.setClasses(info.classes);
    await this.render();
  }

  getState(): ViewerState | null {
    return this.state ? { ...this.state } : null;
  }

  /** Local scribble layer for one (class, axis, slice); zeros if untouched. */
  localScribble(classId: number, axis: Axis, index: number): Uint8Array {
    const s = this.state;
    if (!s) return new Uint8Array(0);
    const [rows, cols] = sliceDims(s.dims, axis);
    const layer = this.layers.get(layerKey(classId, axis, index));
    return layer ? layer.slice() : new Uint8Array(rows * cols);
  }

  pendingRetries(): number {
    return this.queued.length;
  }

  private overlayParam(s: ViewerState): string {
    if (s.overlay === 'probability') return `prob:${s.activeClass}`;
    return s.overlay;
  }

  /** GET the visible slice and push it plus the scribble layer to the host. */
  private async render(): Promise<void> {
    const s = this.state;
    if (!s) return;
    const png = await this.api.fetchSlice(s.sessionId, s.axis, s.index, this.overlayParam(s));
    this.host.showSlice(png, { ...s });
    this.host.showScribbleOverlay(
      this.localScribble(s.activeClass, s.axis, s.index),
      sliceDims(s.dims, s.axis),
    );
    this.host.setRefineEnabled(canRefine(s));
  }

  /** Slice navigation — read-only, never posts. */
  async setSlice(index: number): Promise<void> {
    if (!this.state) return;
    this.state = setIndex(this.state, index);
    await this.render();
  }

  async setAxis(axis: Axis): Promise<void> {
    if (!this.state) return;
    this.state = setAxis(this.state, axis);
    await this.render();
  }

  async setOverlayMode(mode: OverlayMode): Promise<void> {
    if (!this.state) return;
    this.state = setOverlay(this.state, mode);
    await this.render();
  }

  setBrushRadius(radius: number): void {
    if (this.state) this.state = setBrush(this.state, radius);
  }

  setPolarityMode(polarity: Polarity): void {
    if (this.state) this.state = setPolarity(this.state, polarity);
  }

  setClass(classId: number): void {
    if (this.state) this.state = setActiveClass(this.state, classId);
  }

  /**
   * Rasterize a stroke on the visible slice, apply it to the local layer,
   * and post it. A failed post is queued for retry and keeps the dirty flag
   * so refine stays reachable once the network returns.
   */
  async stroke(points: StrokePoint[]): Promise<void> {
    const s = this.state;
    if (!s) return;
    const dims2 = sliceDims(s.dims, s.axis);
    const mask = rasterizeStroke(points, s.brushRadius, dims2);
    const rle = encodeRle(mask, dims2);
    if (rle.runs.length === 0) return;

    const key = layerKey(s.activeClass, s.axis, s.index);
    let layer = this.layers.get(key);
    if (!layer) {
      layer = new Uint8Array(dims2[0] * dims2[1]);
      this.layers.set(key, layer);
    }
    if (s.polarity === 'add') mergeMask(layer, mask);
    else clearMask(layer, mask);

    this.state = markDirty(s);
    this.host.showScribbleOverlay(layer.slice(), dims2);

    const payload: ScribblePayload = {
      class_id: s.activeClass,
      axis: s.axis,
      index: s.index,
      rle,
      polarity: s.polarity,
    };
    try {
      await this.gate.run(() => this.api.postScribble(s.sessionId, payload));
    } catch {
      this.queued.push(payload);
      this.host.setStatus(`scribble queued (${this.queued.length} pending)`);
    }
    this.host.setRefineEnabled(canRefine(this.state));
  }

  /** Re-post scribbles that failed earlier; stops at the first failure. */
  async retryQueued(): Promise<void> {
    const s = this.state;
    if (!s) return;
    while (this.queued.length > 0) {
      const payload = this.queued[0]!;
      try {
        await this.gate.run(() => this.api.postScribble(s.sessionId, payload));
      } catch {
        this.host.setStatus(`scribble queued (${this.queued.length} pending)`);
        return;
      }
      this.queued.shift();
    }
  }

  /**
   * Run refine if there are unconsumed scribbles. On 409 (another request
   * holds the session) the dirty flag survives, so the button comes back.
   */
  async refine(): Promise<void> {
    const s = this.state;
    if (!s || !canRefine(s) || this.queued.length > 0) return;
    this.state = { ...s, busy: true };
    this.host.setRefineEnabled(false);
    this.host.setStatus('refining…');
    try {
      const out = await this.gate.run(() => this.api.refine(s.sessionId));
      const phases = Object.entries(out.report.phases)
        .map(([name, ms]) => `${name} ${ms.toFixed(1)}ms`)
        .join(', ');
      this.host.setStatus(`refine done (${phases})`);
      this.state = clearDirty({ ...this.state, busy: false });
      await this.render();
    } catch (err) {
      this.state = { ...this.state, busy: false };
      if (err instanceof ApiError && err.status === 409) {
        this.host.setStatus('session busy — try again shortly');
        this.host.setRefineEnabled(canRefine(this.state));
        return;
      }
      this.host.setRefineEnabled(canRefine(this.state));
      throw err;
    }
  }
}
