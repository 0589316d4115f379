import { Table, distinct, readCsv, requireColumns } from "./csv.js";
import {
  Frame,
  PALETTE,
  axes,
  document,
  el,
  legend,
  linearScale,
  logScale,
  polyline,
  text,
} from "./svg.js";

export type FigureKind = "trajectory" | "grad_norm" | "sweep_summary";

export interface FigureSpec {
  kind: FigureKind;
  input: string;
  output: string;
  width?: number;
  height?: number;
  title?: string;
}

const KINDS: FigureKind[] = ["trajectory", "grad_norm", "sweep_summary"];

export function validateSpec(obj: unknown, path = "spec"): FigureSpec {
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new Error(`${path}: expected an object`);
  }
  const rec = obj as Record<string, unknown>;
  const allowed = new Set(["kind", "input", "output", "width", "height", "title"]);
  for (const key of Object.keys(rec)) {
    if (!allowed.has(key)) throw new Error(`${path}: unknown key "${key}"`);
  }
  const kind = rec.kind;
  if (typeof kind !== "string" || !KINDS.includes(kind as FigureKind)) {
    throw new Error(`${path}.kind: expected one of ${KINDS.join(", ")}`);
  }
  if (typeof rec.input !== "string") throw new Error(`${path}.input: expected a path`);
  if (typeof rec.output !== "string") throw new Error(`${path}.output: expected a path`);
  for (const dim of ["width", "height"] as const) {
    if (rec[dim] !== undefined && typeof rec[dim] !== "number") {
      throw new Error(`${path}.${dim}: expected a number`);
    }
  }
  return {
    kind: kind as FigureKind,
    input: rec.input,
    output: rec.output,
    width: (rec.width as number | undefined) ?? 640,
    height: (rec.height as number | undefined) ?? 420,
    title: rec.title as string | undefined,
  };
}

function frameOf(spec: FigureSpec): Frame {
  return {
    width: spec.width ?? 640,
    height: spec.height ?? 420,
    margin: { top: 26, right: 20, bottom: 40, left: 56 },
  };
}

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  return [lo, hi];
}

/** 2-D projection of the iterate path with the saddle marked at the origin. */
export function renderTrajectory(table: Table, spec: FigureSpec): string {
  requireColumns(table, ["round", "w0", "w1"]);
  if (table.rows.length === 0) {
    throw new Error(`${table.path}: trajectory is empty (no rounds to plot)`);
  }
  const xs = table.rows.map((r) => r.w0 as number);
  const ys = table.rows.map((r) => r.w1 as number);
  const frame = frameOf(spec);
  const [xlo, xhi] = extent([...xs, 0]);
  const [ylo, yhi] = extent([...ys, 0]);
  const padX = 0.08 * (xhi - xlo || 1);
  const padY = 0.08 * (yhi - ylo || 1);
  const sx = linearScale([xlo - padX, xhi + padX], [frame.margin.left, frame.width - frame.margin.right]);
  const sy = linearScale([ylo - padY, yhi + padY], [frame.height - frame.margin.bottom, frame.margin.top]);

  const body = axes(frame, sx, sy, "w0", "w1");
  body.push(polyline(xs.map((x, i) => [sx(x), sy(ys[i])] as [number, number]), PALETTE[0]));
  // saddle marker at the origin
  body.push(el("circle", { cx: sx(0), cy: sy(0), r: 4, fill: "none", stroke: "#d62728", "stroke-width": 1.5 }));
  body.push(text("saddle", { x: sx(0) + 7, y: sy(0) - 6, "font-size": 10, "font-family": "sans-serif", fill: "#d62728" }));
  // start and end markers
  body.push(el("circle", { cx: sx(xs[0]), cy: sy(ys[0]), r: 3, fill: PALETTE[0] }));
  body.push(el("circle", { cx: sx(xs[xs.length - 1]), cy: sy(ys[ys.length - 1]), r: 3, fill: "#2ca02c" }));
  body.push(
    text("projection onto first two flattened coordinates", {
      x: frame.width - frame.margin.right,
      y: frame.height - 6,
      "font-size": 9,
      "text-anchor": "end",
      "font-family": "sans-serif",
      fill: "#666",
    }),
  );
  return document(frame, body, spec.title ?? "model evolution");
}

/** Gradient norm vs round, one curve per participation level. */
export function renderGradNorm(table: Table, spec: FigureSpec): string {
  requireColumns(table, ["round", "grad_norm"]);
  if (table.rows.length === 0) {
    throw new Error(`${table.path}: no rows to plot`);
  }
  const hasL = table.columns.includes("L");
  const hasSeed = table.columns.includes("seed");
  const frame = frameOf(spec);
  const rounds = table.rows.map((r) => r.round as number);
  const norms = table.rows
    .map((r) => r.grad_norm as number)
    .filter((v) => v > 0);
  const sx = linearScale(extent(rounds), [frame.margin.left, frame.width - frame.margin.right]);
  const sy = logScale(
    norms.length ? extent(norms) : [1e-6, 1],
    [frame.height - frame.margin.bottom, frame.margin.top],
  );
  const body = axes(frame, sx, sy, "round", "gradient norm");

  const levels = hasL ? distinct(table, "L") : [null];
  const entries: Array<{ label: string; color: string }> = [];
  levels.forEach((L, i) => {
    const color = PALETTE[i % PALETTE.length];
    const subset = hasL ? table.rows.filter((r) => r.L === L) : table.rows;
    const seeds = hasSeed
      ? [...new Set(subset.map((r) => r.seed as number))]
      : [null];
    for (const seed of seeds) {
      const rows = hasSeed ? subset.filter((r) => r.seed === seed) : subset;
      const pts = rows
        .filter((r) => (r.grad_norm as number) > 0)
        .map((r) => [sx(r.round as number), sy(r.grad_norm as number)] as [number, number]);
      if (pts.length >= 2) body.push(polyline(pts, color, 1.2));
    }
    entries.push({ label: L === null ? "trajectory" : `L=${L}`, color });
  });
  body.push(...legend(frame, entries));
  return document(frame, body, spec.title ?? "gradient norm by participation");
}

/** Median escape round per participation level with quartile whiskers. */
export function renderSweepSummary(table: Table, spec: FigureSpec): string {
  requireColumns(table, ["L", "median_escape_round", "q1_escape_round", "q3_escape_round"]);
  const rows = table.rows.filter((r) => r.median_escape_round !== null);
  if (rows.length === 0) {
    throw new Error(`${table.path}: no escape rounds to plot`);
  }
  const frame = frameOf(spec);
  const Ls = rows.map((r) => r.L as number);
  const meds = rows.map((r) => r.median_escape_round as number);
  const q3s = rows.map((r) => (r.q3_escape_round ?? r.median_escape_round) as number);
  const sx = logScale(extent(Ls), [frame.margin.left, frame.width - frame.margin.right]);
  const sy = linearScale([0, Math.max(...q3s) * 1.1], [frame.height - frame.margin.bottom, frame.margin.top]);
  const body = axes(frame, sx, sy, "participation level L", "escape round");
  const entries: Array<{ label: string; color: string }> = [];
  rows.forEach((r, i) => {
    const color = PALETTE[i % PALETTE.length];
    const px = sx(r.L as number);
    const q1 = (r.q1_escape_round ?? r.median_escape_round) as number;
    const q3 = (r.q3_escape_round ?? r.median_escape_round) as number;
    body.push(el("line", { x1: px, y1: sy(q1), x2: px, y2: sy(q3), stroke: color, "stroke-width": 2 }));
    body.push(el("circle", { cx: px, cy: sy(r.median_escape_round as number), r: 4, fill: color }));
    entries.push({ label: `L=${r.L}`, color });
  });
  body.push(polyline(rows.map((r, i) => [sx(r.L as number), sy(meds[i])] as [number, number]), "#999", 1));
  body.push(...legend(frame, entries));
  return document(frame, body, spec.title ?? "escape round by participation");
}

export function renderFigure(spec: FigureSpec): string {
  const table = readCsv(spec.input);
  switch (spec.kind) {
    case "trajectory":
      return renderTrajectory(table, spec);
    case "grad_norm":
      return renderGradNorm(table, spec);
    case "sweep_summary":
      return renderSweepSummary(table, spec);
  }
}

/** Legend labels present in an SVG document (for checks and tests). */
export function legendLabels(svg: string): string[] {
  const out: string[] = [];
  const re = /class="legend-label"[^>]*>([^<]*)<\/text>/g;
  let m: RegExpExecArray | null;
  while ((m = re.exec(svg)) !== null) out.push(m[1]);
  return out;
}
