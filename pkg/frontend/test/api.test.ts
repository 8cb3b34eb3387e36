/**
 * Client and viewer behaviour against fakes: request shapes, error paths,
 * the navigation-never-mutates property, and optimistic-overlay consistency
 * against an in-memory server that applies the same scribble algebra as the
 * real one (add accumulates, erase clears add on that slice).
 */

import { describe, expect, it } from 'vitest';
import { ApiClient, ApiError, type FetchLike } from '../src/api.js';
import { decodeRle, type RleMask } from '../src/rle.js';
import { sliceDims } from '../src/state.js';
import type { ClassEntry, RunReport, SessionInfo, ViewerState } from '../src/types.js';
import { Viewer, type SliceHost } from '../src/viewer.js';

const CLASSES: ClassEntry[] = [
  { sentence: 'MRI of the liver', instance_label: 0, class_id: 5, class_name: 'Liver', channel: 0 },
  { sentence: 'MRI of the spleen', instance_label: 0, class_id: 7, class_name: 'Spleen', channel: 1 },
];

const INFO: SessionInfo = {
  id: 's1',
  dims: [16, 12, 10],
  spacing: [1, 1, 1],
  modality: 'MRI',
  has_result: true,
  classes: CLASSES,
};

function report(mode: string): RunReport {
  return {
    n_classes: 2,
    execution: 'parallel',
    mode,
    fallback: false,
    phases: { resample: 1.5, model: 20.25 },
    forwards: { full: { backbone: 1, adapt: 1, refiner: 2 } },
    peak_bytes: 4096,
    prompt_errors: [],
    backbone_forwards: 1,
  };
}

interface Recorded {
  method: string;
  url: string;
  body?: unknown;
}

/** Minimal in-memory stand-in for the segmentation service. */
class MockServer {
  readonly requests: Recorded[] = [];
  /** add-buffer per `${classId}:${axis}:${index}` — what refine consumes. */
  readonly addBuf = new Map<string, Uint8Array>();
  readonly eraseBuf = new Map<string, Uint8Array>();
  version = 0;
  refineBusyOnce = false;
  offline = false;

  constructor(private readonly info: SessionInfo) {}

  private buf(map: Map<string, Uint8Array>, key: string, n: number): Uint8Array {
    let b = map.get(key);
    if (!b) {
      b = new Uint8Array(n);
      map.set(key, b);
    }
    return b;
  }

  fetch: FetchLike = async (url, init) => {
    const method = (init?.method ?? 'GET').toUpperCase();
    const body = init?.body ? JSON.parse(String(init.body)) : undefined;
    this.requests.push({ method, url, body });
    if (this.offline) throw new TypeError('fetch failed');

    const u = new URL(url);
    const json = (obj: unknown, status = 200) =>
      new Response(JSON.stringify(obj), {
        status,
        headers: { 'content-type': 'application/json' },
      });

    if (u.pathname === `/sessions/${this.info.id}` && method === 'GET') {
      return json(this.info);
    }
    if (u.pathname.startsWith('/sessions/') && u.pathname.endsWith('/scribbles')) {
      const rle = body.rle as RleMask;
      const mask = decodeRle(rle);
      const key = `${body.class_id}:${body.axis}:${body.index}`;
      const add = this.buf(this.addBuf, key, mask.length);
      if (body.polarity === 'add') {
        for (let i = 0; i < mask.length; i++) if (mask[i]) add[i] = 1;
      } else {
        const erase = this.buf(this.eraseBuf, key, mask.length);
        for (let i = 0; i < mask.length; i++) {
          if (mask[i]) {
            erase[i] = 1;
            add[i] = 0;
          }
        }
      }
      return new Response(null, { status: 204 });
    }
    if (u.pathname.endsWith('/refine') && method === 'POST') {
      if (this.refineBusyOnce) {
        this.refineBusyOnce = false;
        return json({ detail: 'session busy' }, 409);
      }
      this.version += 1;
      return json({ report: report('hybrid') });
    }
    if (u.pathname.endsWith('/slice') && method === 'GET') {
      // Opaque bytes that change whenever refine ran — enough for the client.
      const tag = `png:${u.searchParams.toString()}:v${this.version}`;
      return new Response(new TextEncoder().encode(tag), {
        status: 200,
        headers: { 'content-type': 'image/png' },
      });
    }
    return json({ detail: 'not found' }, 404);
  };
}

/** Records everything the viewer pushes at the page. */
class MockHost implements SliceHost {
  slices: { png: Uint8Array; state: ViewerState }[] = [];
  overlays: Uint8Array[] = [];
  classes: ClassEntry[] = [];
  statuses: string[] = [];
  errors: string[] = [];
  refineEnabled: boolean[] = [];

  showSlice(png: Uint8Array, state: ViewerState): void {
    this.slices.push({ png, state });
  }
  showScribbleOverlay(mask: Uint8Array): void {
    this.overlays.push(mask);
  }
  setClasses(classes: ClassEntry[]): void {
    this.classes = classes;
  }
  setStatus(text: string): void {
    this.statuses.push(text);
  }
  setError(text: string): void {
    this.errors.push(text);
  }
  setRefineEnabled(enabled: boolean): void {
    this.refineEnabled.push(enabled);
  }
  lastSlice(): { png: Uint8Array; state: ViewerState } {
    return this.slices[this.slices.length - 1]!;
  }
}

function makeViewer(server: MockServer): { viewer: Viewer; host: MockHost; api: ApiClient } {
  const api = new ApiClient('http://mock', server.fetch);
  const host = new MockHost();
  return { viewer: new Viewer(api, host), host, api };
}

describe('ApiClient request shapes', () => {
  it('builds the documented URLs, methods and bodies', async () => {
    const server = new MockServer(INFO);
    const api = new ApiClient('http://mock', server.fetch);

    await api.getSession('s1');
    await api.postScribble('s1', {
      class_id: 5,
      axis: 2,
      index: 4,
      rle: { dims: [16, 12], runs: [[0, 3]] },
      polarity: 'add',
    });
    await api.refine('s1');
    await api.fetchSlice('s1', 2, 4, 'labels');

    const [get, scr, ref, slice] = server.requests;
    expect(get).toMatchObject({ method: 'GET', url: 'http://mock/sessions/s1' });
    expect(scr!.method).toBe('POST');
    expect(scr!.url).toBe('http://mock/sessions/s1/scribbles');
    expect(scr!.body).toEqual({
      class_id: 5,
      axis: 2,
      index: 4,
      rle: { dims: [16, 12], runs: [[0, 3]] },
      polarity: 'add',
    });
    expect(ref).toMatchObject({ method: 'POST', url: 'http://mock/sessions/s1/refine' });
    expect(slice!.url).toBe('http://mock/sessions/s1/slice?axis=2&index=4&overlay=labels');
  });

  it('raises ApiError with the server status and detail', async () => {
    const server = new MockServer(INFO);
    const api = new ApiClient('http://mock', server.fetch);
    const err = await api.getSession('missing').catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(404);
    expect(err.message).toBe('not found');
  });
});

describe('Viewer.load', () => {
  it('renders the middle slice and fills the class picker', async () => {
    const server = new MockServer(INFO);
    const { viewer, host } = makeViewer(server);
    await viewer.load('s1');

    expect(host.classes.length).toBe(2);
    expect(host.errors).toEqual([]);
    const { state } = host.lastSlice();
    expect(state.axis).toBe(2);
    expect(state.index).toBe(5); // floor(10 / 2)
    expect(state.overlay).toBe('labels');
  });

  it('shows the error panel on 404 and renders nothing', async () => {
    const server = new MockServer(INFO);
    const { viewer, host } = makeViewer(server);
    await viewer.load('nope');
    expect(host.errors.length).toBe(1);
    expect(host.errors[0]).toMatch(/not found/);
    expect(host.slices).toEqual([]);
  });
});

describe('navigation never mutates', () => {
  it('issues only GETs across arbitrary slice/axis/overlay churn', async () => {
    const server = new MockServer(INFO);
    const { viewer } = makeViewer(server);
    await viewer.load('s1');

    await viewer.setSlice(3);
    await viewer.setSlice(0);
    await viewer.setAxis(0);
    await viewer.setSlice(99);
    await viewer.setAxis(1);
    await viewer.setOverlayMode('probability');
    await viewer.setOverlayMode('none');
    await viewer.setAxis(2);
    for (let i = 0; i < 10; i++) await viewer.setSlice(i);

    for (const req of server.requests) expect(req.method).toBe('GET');
  });

  it('requests prob:{class} when the overlay is probability', async () => {
    const server = new MockServer(INFO);
    const { viewer } = makeViewer(server);
    await viewer.load('s1');
    viewer.setClass(7);
    await viewer.setOverlayMode('probability');
    const last = server.requests[server.requests.length - 1]!;
    expect(last.url).toContain('overlay=prob%3A7');
  });
});

describe('optimistic scribble overlay', () => {
  it('local layer equals the server add-buffer after mixed strokes', async () => {
    const server = new MockServer(INFO);
    const { viewer } = makeViewer(server);
    await viewer.load('s1');

    viewer.setBrushRadius(2);
    await viewer.stroke([
      { r: 3, c: 2 },
      { r: 3, c: 9 },
    ]);
    await viewer.stroke([{ r: 8, c: 4 }]);
    viewer.setPolarityMode('erase');
    await viewer.stroke([
      { r: 3, c: 5 },
      { r: 3, c: 6 },
    ]);
    viewer.setPolarityMode('add');
    await viewer.stroke([{ r: 3, c: 5 }]);

    const s = viewer.getState()!;
    const key = `${s.activeClass}:${s.axis}:${s.index}`;
    const serverAdd = server.addBuf.get(key)!;
    expect(viewer.localScribble(s.activeClass, s.axis, s.index)).toEqual(serverAdd);
    expect(s.dirty).toBe(true);
  });

  it('keeps per-slice layers independent', async () => {
    const server = new MockServer(INFO);
    const { viewer } = makeViewer(server);
    await viewer.load('s1');
    await viewer.stroke([{ r: 2, c: 2 }]);
    await viewer.setSlice(7);
    await viewer.stroke([{ r: 9, c: 9 }]);

    const s = viewer.getState()!;
    const [rows, cols] = sliceDims(s.dims, s.axis);
    const at7 = viewer.localScribble(s.activeClass, s.axis, 7);
    const at5 = viewer.localScribble(s.activeClass, s.axis, 5);
    expect(at7[9 * cols + 9]).toBe(1);
    expect(at7[2 * cols + 2]).toBe(0);
    expect(at5[2 * cols + 2]).toBe(1);
    expect(at5.length).toBe(rows * cols);
  });

  it('queues failed posts, keeps dirty, and flushes on retry', async () => {
    const server = new MockServer(INFO);
    const { viewer, host } = makeViewer(server);
    await viewer.load('s1');

    server.offline = true;
    await viewer.stroke([{ r: 1, c: 1 }]);
    await viewer.stroke([{ r: 4, c: 4 }]);
    expect(viewer.pendingRetries()).toBe(2);
    expect(viewer.getState()!.dirty).toBe(true);
    expect(host.statuses.some((t) => t.includes('queued'))).toBe(true);

    // Refine must not fire while strokes are stuck client-side.
    const before = server.requests.length;
    await viewer.refine();
    expect(server.requests.length).toBe(before);

    server.offline = false;
    await viewer.retryQueued();
    expect(viewer.pendingRetries()).toBe(0);

    const s = viewer.getState()!;
    const serverAdd = server.addBuf.get(`${s.activeClass}:${s.axis}:${s.index}`)!;
    expect(viewer.localScribble(s.activeClass, s.axis, s.index)).toEqual(serverAdd);
    expect(s.dirty).toBe(true);
  });
});

describe('Viewer.refine', () => {
  it('does nothing until a scribble lands', async () => {
    const server = new MockServer(INFO);
    const { viewer } = makeViewer(server);
    await viewer.load('s1');
    const before = server.requests.length;
    await viewer.refine();
    expect(server.requests.length).toBe(before);
  });

  it('posts refine, reports timings, clears dirty, refetches the slice', async () => {
    const server = new MockServer(INFO);
    const { viewer, host } = makeViewer(server);
    await viewer.load('s1');
    await viewer.stroke([{ r: 2, c: 3 }]);

    const pngBefore = host.lastSlice().png;
    await viewer.refine();

    expect(host.statuses.some((t) => t.includes('model 20.3ms'))).toBe(true);
    const s = viewer.getState()!;
    expect(s.dirty).toBe(false);
    expect(s.busy).toBe(false);
    // Slice was refetched and the overlay bytes moved with the new result.
    expect(host.lastSlice().png).not.toEqual(pngBefore);
    expect(host.refineEnabled[host.refineEnabled.length - 1]).toBe(false);
  });

  it('keeps dirty and re-enables the button on 409', async () => {
    const server = new MockServer(INFO);
    const { viewer, host } = makeViewer(server);
    await viewer.load('s1');
    await viewer.stroke([{ r: 2, c: 3 }]);

    server.refineBusyOnce = true;
    await viewer.refine();
    expect(host.statuses.some((t) => t.includes('busy'))).toBe(true);
    expect(viewer.getState()!.dirty).toBe(true);
    expect(host.refineEnabled[host.refineEnabled.length - 1]).toBe(true);

    // Second attempt goes through.
    await viewer.refine();
    expect(viewer.getState()!.dirty).toBe(false);
  });
});
