/**
 * Wire types shared across the viewer.
 *
 * These mirror the JSON the segmentation service emits; keep field names
 * snake_case where the server does, so payloads can be passed through
 * without a translation layer.
 */

export type Axis = 0 | 1 | 2;

export type Polarity = 'add' | 'erase';

/** What to composite on top of the grayscale slice. */
export type OverlayMode = 'labels' | 'probability' | 'none';

export interface SessionSummary {
  id: string;
  dims: [number, number, number];
  spacing: [number, number, number];
  modality: string;
}

/** One text prompt; instance_label > 0 requests a specific lesion instance. */
export interface PromptIn {
  sentence: string;
  instance_label?: number;
}

/** One row of the class picker; `channel` indexes the probability volume. */
export interface ClassEntry {
  sentence: string;
  instance_label: number;
  class_id: number;
  class_name: string;
  channel: number;
}

export interface SessionInfo extends SessionSummary {
  classes: ClassEntry[];
  has_result: boolean;
}

/** Per-run accounting block returned by segment and refine. */
export interface RunReport {
  n_classes: number;
  execution: string;
  mode: string;
  fallback: boolean;
  phases: Record<string, number>;
  forwards: Record<string, Record<string, number>>;
  peak_bytes: number;
  prompt_errors: { sentence: string; error: string; detail: string }[];
  backbone_forwards: number;
}

export interface SegmentResponse {
  report: RunReport;
  classes: ClassEntry[];
}

export interface RefineResponse {
  report: RunReport;
}
