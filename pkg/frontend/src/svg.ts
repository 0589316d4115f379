/** Minimal SVG assembly: enough for line charts with axes and a legend. */

export interface Scale {
  (v: number): number;
  ticks(count: number): number[];
}

export function linearScale(
  domain: [number, number],
  range: [number, number],
): Scale {
  let [d0, d1] = domain;
  if (d0 === d1) {
    d0 -= 1;
    d1 += 1;
  }
  const f = ((v: number) =>
    range[0] + ((v - d0) / (d1 - d0)) * (range[1] - range[0])) as Scale;
  f.ticks = (count: number) => niceTicks(d0, d1, count);
  return f;
}

export function logScale(
  domain: [number, number],
  range: [number, number],
): Scale {
  const lo = Math.max(domain[0], 1e-300);
  const hi = Math.max(domain[1], lo * 10);
  const [l0, l1] = [Math.log10(lo), Math.log10(hi)];
  const f = ((v: number) =>
    range[0] +
    ((Math.log10(Math.max(v, 1e-300)) - l0) / (l1 - l0)) *
      (range[1] - range[0])) as Scale;
  f.ticks = () => {
    const out: number[] = [];
    for (let e = Math.ceil(l0); e <= Math.floor(l1); e++) out.push(10 ** e);
    return out.length >= 2 ? out : [lo, hi];
  };
  return f;
}

function niceTicks(lo: number, hi: number, count: number): number[] {
  const span = hi - lo;
  const step0 = span / Math.max(count, 1);
  const mag = 10 ** Math.floor(Math.log10(step0));
  const step = [1, 2, 5, 10].map((m) => m * mag).find((s) => span / s <= count) ?? mag * 10;
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + 1e-12 * span; v += step) out.push(Number(v.toPrecision(12)));
  return out;
}

export function el(
  tag: string,
  attrs: Record<string, string | number>,
  children: string[] = [],
): string {
  const a = Object.entries(attrs)
    .map(([k, v]) => `${k}="${String(v)}"`)
    .join(" ");
  if (children.length === 0) return `<${tag} ${a}/>`;
  return `<${tag} ${a}>${children.join("")}</${tag}>`;
}

export function text(
  content: string,
  attrs: Record<string, string | number>,
): string {
  const a = Object.entries(attrs)
    .map(([k, v]) => `${k}="${String(v)}"`)
    .join(" ");
  return `<text ${a}>${escapeXml(content)}</text>`;
}

export function escapeXml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function polyline(
  points: Array<[number, number]>,
  stroke: string,
  width = 1.5,
): string {
  const pts = points.map(([x, y]) => `${round2(x)},${round2(y)}`).join(" ");
  return `<polyline fill="none" stroke="${stroke}" stroke-width="${width}" points="${pts}"/>`;
}

function round2(v: number): number {
  return Math.round(v * 100) / 100;
}

export const PALETTE = [
  "#1f77b4",
  "#d62728",
  "#2ca02c",
  "#9467bd",
  "#ff7f0e",
  "#8c564b",
  "#17becf",
  "#7f7f7f",
];

export interface Frame {
  width: number;
  height: number;
  margin: { top: number; right: number; bottom: number; left: number };
}

export function axes(
  frame: Frame,
  x: Scale,
  y: Scale,
  xLabel: string,
  yLabel: string,
): string[] {
  const { width, height, margin } = frame;
  const parts: string[] = [];
  const x0 = margin.left;
  const x1 = width - margin.right;
  const y0 = height - margin.bottom;
  const y1 = margin.top;
  parts.push(el("line", { x1: x0, y1: y0, x2: x1, y2: y0, stroke: "#333" }));
  parts.push(el("line", { x1: x0, y1: y0, x2: x0, y2: y1, stroke: "#333" }));
  for (const t of x.ticks(6)) {
    const px = x(t);
    if (px < x0 - 0.5 || px > x1 + 0.5) continue;
    parts.push(el("line", { x1: px, y1: y0, x2: px, y2: y0 + 4, stroke: "#333" }));
    parts.push(
      text(formatTick(t), {
        x: px,
        y: y0 + 16,
        "font-size": 10,
        "text-anchor": "middle",
        "font-family": "sans-serif",
      }),
    );
  }
  for (const t of y.ticks(6)) {
    const py = y(t);
    if (py > y0 + 0.5 || py < y1 - 0.5) continue;
    parts.push(el("line", { x1: x0 - 4, y1: py, x2: x0, y2: py, stroke: "#333" }));
    parts.push(
      text(formatTick(t), {
        x: x0 - 6,
        y: py + 3,
        "font-size": 10,
        "text-anchor": "end",
        "font-family": "sans-serif",
      }),
    );
  }
  parts.push(
    text(xLabel, {
      x: (x0 + x1) / 2,
      y: height - 6,
      "font-size": 11,
      "text-anchor": "middle",
      "font-family": "sans-serif",
    }),
  );
  parts.push(
    text(yLabel, {
      x: 12,
      y: (y0 + y1) / 2,
      "font-size": 11,
      "text-anchor": "middle",
      "font-family": "sans-serif",
      transform: `rotate(-90 12 ${(y0 + y1) / 2})`,
    }),
  );
  return parts;
}

export function formatTick(v: number): string {
  if (v === 0) return "0";
  const a = Math.abs(v);
  if (a >= 1e5 || a < 1e-3) return v.toExponential(0);
  return String(Number(v.toPrecision(6)));
}

export function legend(
  frame: Frame,
  entries: Array<{ label: string; color: string }>,
): string[] {
  const parts: string[] = [];
  const x = frame.width - frame.margin.right - 90;
  let y = frame.margin.top + 8;
  for (const { label, color } of entries) {
    parts.push(el("line", { x1: x, y1: y - 3, x2: x + 18, y2: y - 3, stroke: color, "stroke-width": 2 }));
    parts.push(
      text(label, {
        x: x + 24,
        y,
        "font-size": 11,
        "font-family": "sans-serif",
        class: "legend-label",
      }),
    );
    y += 16;
  }
  return parts;
}

export function document(frame: Frame, body: string[], title?: string): string {
  const head = title
    ? [
        text(title, {
          x: frame.width / 2,
          y: 14,
          "font-size": 12,
          "text-anchor": "middle",
          "font-family": "sans-serif",
          "font-weight": "bold",
        }),
      ]
    : [];
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${frame.width}" ` +
    `height="${frame.height}" viewBox="0 0 ${frame.width} ${frame.height}">` +
    `<rect width="${frame.width}" height="${frame.height}" fill="white"/>` +
    head.join("") +
    body.join("") +
    `</svg>\n`
  );
}
