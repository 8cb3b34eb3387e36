/**
 * Thin typed client for the segmentation HTTP service.
 *
 * All traffic goes through a fetch-compatible function so tests can swap in
 * a recording fake or an in-memory server. Non-2xx responses become
 * ApiError with the status and whatever detail the server sent.
 */

import type {
  Axis,
  Polarity,
  PromptIn,
  RefineResponse,
  SegmentResponse,
  SessionInfo,
  SessionSummary,
} from './types.js';
import type { RleMask } from './rle.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

async function raiseForStatus(res: Response): Promise<void> {
  if (res.ok) return;
  let detail = res.statusText;
  try {
    const body = await res.json();
    if (body && typeof body === 'object' && 'detail' in body) {
      detail = typeof body.detail === 'string' ? body.detail : JSON.stringify(body.detail);
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, detail);
}

export interface ScribblePayload {
  class_id: number;
  axis: Axis;
  index: number;
  rle: RleMask;
  polarity: Polarity;
}

export class ApiClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    private readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + url, init);
    await raiseForStatus(res);
    return (await res.json()) as T;
  }

  private post(url: string, body: unknown): Promise<Response> {
    return this.fetchImpl(this.baseUrl + url, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  createPhantomSession(): Promise<SessionSummary> {
    return this.json<SessionSummary>('/sessions', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ phantom: true }),
    });
  }

  createSession(path: string, modality: string): Promise<SessionSummary> {
    return this.json<SessionSummary>('/sessions', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ path, modality }),
    });
  }

  getSession(sid: string): Promise<SessionInfo> {
    return this.json<SessionInfo>(`/sessions/${sid}`);
  }

  async segment(sid: string, prompts: PromptIn[], mode = 'text-only'): Promise<SegmentResponse> {
    const res = await this.post(`/sessions/${sid}/segment`, { prompts, mode });
    await raiseForStatus(res);
    return (await res.json()) as SegmentResponse;
  }

  async postScribble(sid: string, payload: ScribblePayload): Promise<void> {
    const res = await this.post(`/sessions/${sid}/scribbles`, payload);
    await raiseForStatus(res);
    if (res.status !== 204) {
      throw new ApiError(res.status, `expected 204 from scribble post, got ${res.status}`);
    }
  }

  async refine(sid: string): Promise<RefineResponse> {
    const res = await this.post(`/sessions/${sid}/refine`, {});
    await raiseForStatus(res);
    return (await res.json()) as RefineResponse;
  }

  sliceUrl(sid: string, axis: Axis, index: number, overlay: string): string {
    const q = new URLSearchParams({
      axis: String(axis),
      index: String(index),
      overlay,
    });
    return `${this.baseUrl}/sessions/${sid}/slice?${q}`;
  }

  /** Fetch a rendered slice as PNG bytes. */
  async fetchSlice(sid: string, axis: Axis, index: number, overlay: string): Promise<Uint8Array> {
    const res = await this.fetchImpl(this.sliceUrl(sid, axis, index, overlay));
    await raiseForStatus(res);
    return new Uint8Array(await res.arrayBuffer());
  }

  resultUrl(sid: string): string {
    return `${this.baseUrl}/sessions/${sid}/result`;
  }
}
