/**
 * End-to-end loop against the real HTTP service: spawn the Python server on
 * a free port, drive the phantom session through segment -> scribble ->
 * refine with the actual viewer, and check the concurrency contract (second
 * refine while one is running gets 409).
 *
 * Needs `python3 -m medalseg` importable (pip install -e in the repo root).
 */

import { spawn, type ChildProcess } from 'node:child_process';
import { mkdtempSync, rmSync } from 'node:fs';
import net from 'node:net';
import os from 'node:os';
import path from 'node:path';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { ApiClient, ApiError } from '../src/api.js';
import type { ClassEntry, ViewerState } from '../src/types.js';
import { Viewer, type SliceHost } from '../src/viewer.js';

const PHANTOM_PROMPTS = [
  { sentence: 'T2 MRI of the liver' },
  { sentence: 'Abdominal MRI showing splenic tissue' },
  { sentence: 'Brain MRI, axial view' },
];

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.listen(0, '127.0.0.1', () => {
      const addr = srv.address();
      if (addr && typeof addr === 'object') {
        const port = addr.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error('no port')));
      }
    });
    srv.on('error', reject);
  });
}

async function waitReady(base: string, child: ChildProcess, stderr: string[]): Promise<void> {
  for (let i = 0; i < 240; i++) {
    if (child.exitCode !== null) {
      throw new Error(`server exited early (${child.exitCode}):\n${stderr.join('')}`);
    }
    try {
      const res = await fetch(`${base}/openapi.json`);
      if (res.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error(`server never became ready:\n${stderr.join('')}`);
}

class CapturingHost implements SliceHost {
  slices: { png: Uint8Array; state: ViewerState }[] = [];
  classes: ClassEntry[] = [];
  statuses: string[] = [];
  errors: string[] = [];
  enabled: boolean[] = [];

  showSlice(png: Uint8Array, state: ViewerState): void {
    this.slices.push({ png, state });
  }
  showScribbleOverlay(): void {}
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
    this.enabled.push(enabled);
  }
}

let child: ChildProcess | null = null;
let base = '';
let dataDir = '';
const stderrLines: string[] = [];

beforeAll(async () => {
  const port = await freePort();
  base = `http://127.0.0.1:${port}`;
  dataDir = mkdtempSync(path.join(os.tmpdir(), 'medalseg-ui-'));
  child = spawn(
    'python3',
    ['-m', 'medalseg', 'serve', '--host', '127.0.0.1', '--port', String(port), '--data-dir', dataDir],
    { stdio: ['ignore', 'ignore', 'pipe'] },
  );
  child.stderr!.on('data', (d: Buffer) => stderrLines.push(d.toString()));
  await waitReady(base, child, stderrLines);
}, 180_000);

afterAll(async () => {
  if (child && child.exitCode === null) {
    child.kill('SIGTERM');
    await new Promise((r) => setTimeout(r, 500));
    if (child.exitCode === null) child.kill('SIGKILL');
  }
  if (dataDir) rmSync(dataDir, { recursive: true, force: true });
});

describe('viewer against the live service', () => {
  it(
    'runs the full load -> scribble -> refine loop',
    async () => {
      const api = new ApiClient(base);

      const summary = await api.createPhantomSession();
      expect(summary.modality).toBe('MRI');
      expect(summary.dims).toEqual([64, 64, 64]);

      const seg = await api.segment(summary.id, PHANTOM_PROMPTS);
      expect(seg.report.n_classes).toBe(3);
      expect(seg.classes.length).toBe(3);

      const host = new CapturingHost();
      const viewer = new Viewer(api, host);
      await viewer.load(summary.id);

      // Class picker mirrors /sessions/{id}; middle slice rendered.
      expect(host.classes.length).toBe(3);
      expect(host.errors).toEqual([]);
      const first = host.slices[0]!;
      expect(first.state.index).toBe(32);
      expect(first.png.length).toBeGreaterThan(8);
      // PNG magic, since this came off the real wire.
      expect(Array.from(first.png.slice(0, 4))).toEqual([0x89, 0x50, 0x4e, 0x47]);

      // Liver scribbles in the empty corner on three adjacent slices.
      const liver = host.classes.find((c) => c.class_name === 'Liver')!;
      viewer.setClass(liver.class_id);
      viewer.setBrushRadius(1);
      for (const z of [31, 32, 33]) {
        await viewer.setSlice(z);
        for (let row = 50; row <= 60; row++) {
          await viewer.stroke([
            { r: row, c: 50 },
            { r: row, c: 59 },
          ]);
        }
      }
      expect(viewer.pendingRetries()).toBe(0);
      expect(viewer.getState()!.dirty).toBe(true);

      await viewer.setSlice(32);
      const before = host.slices[host.slices.length - 1]!.png;

      await viewer.refine();
      expect(host.statuses.some((t) => t.startsWith('refine done'))).toBe(true);
      const s = viewer.getState()!;
      expect(s.dirty).toBe(false);

      // The scribbled slice re-rendered with a different composite.
      const after = host.slices[host.slices.length - 1]!.png;
      expect(Buffer.from(after).equals(Buffer.from(before))).toBe(false);
    },
    300_000,
  );

  it(
    'second refine during a running one gets 409',
    async () => {
      const api = new ApiClient(base);
      const summary = await api.createPhantomSession();
      const seg = await api.segment(summary.id, PHANTOM_PROMPTS);
      const cid = seg.classes[0]!.class_id;
      await api.postScribble(summary.id, {
        class_id: cid,
        axis: 2,
        index: 32,
        rle: { dims: [64, 64], runs: [[50 * 64 + 50, 10]] },
        polarity: 'add',
      });

      const a = api.refine(summary.id);
      await new Promise((r) => setTimeout(r, 300));
      const b = new ApiClient(base).refine(summary.id).then(
        () => 'ok' as const,
        (err) => err as unknown,
      );

      const [ra, rb] = await Promise.all([a, b]);
      expect(ra.report.mode).toBe('hybrid');
      expect(rb).toBeInstanceOf(ApiError);
      expect((rb as ApiError).status).toBe(409);
    },
    300_000,
  );
});
