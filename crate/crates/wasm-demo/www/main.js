import init, { min_norm_point, simplex_projection, quadratic_paths, dominance_weights } from "./pkg/multibalance_wasm_demo.js";

const COLORS = ["#d1495b", "#00798c", "#edae49"];

function ctx2d(id) {
  const c = document.getElementById(id);
  const ctx = c.getContext("2d");
  return { c, ctx, w: c.width, h: c.height };
}

function arrow(ctx, x0, y0, x1, y1, color) {
  ctx.strokeStyle = ctx.fillStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(x0, y0);
  ctx.lineTo(x1, y1);
  ctx.stroke();
  const a = Math.atan2(y1 - y0, x1 - x0);
  ctx.beginPath();
  ctx.moveTo(x1, y1);
  ctx.lineTo(x1 - 10 * Math.cos(a - 0.4), y1 - 10 * Math.sin(a - 0.4));
  ctx.lineTo(x1 - 10 * Math.cos(a + 0.4), y1 - 10 * Math.sin(a + 0.4));
  ctx.fill();
}

function dot(ctx, x, y, r, color) {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(x, y, r, 0, 2 * Math.PI);
  ctx.fill();
}

// Min-norm point and simplex ----------------------------------------------

const hull = ctx2d("hull");
const simplex = ctx2d("simplex");
const grads = [[1.2, 0.6], [-0.8, 1.1], [0.3, -0.2]];
const HULL_SCALE = 80;
let dragging = -1;
let clicked = null;

const toHull = ([x, y]) => [hull.w / 2 + HULL_SCALE * x, hull.h / 2 - HULL_SCALE * y];
const fromHull = (px, py) => [(px - hull.w / 2) / HULL_SCALE, (hull.h / 2 - py) / HULL_SCALE];

const VERTS = [[180, 40], [40, 300], [320, 300]];
const toTriangle = (l) => [0, 1].map((k) => l[0] * VERTS[0][k] + l[1] * VERTS[1][k] + l[2] * VERTS[2][k]);

function barycentric(px, py) {
  const [a, b, c] = VERTS;
  const det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
  const l0 = ((b[1] - c[1]) * (px - c[0]) + (c[0] - b[0]) * (py - c[1])) / det;
  const l1 = ((c[1] - a[1]) * (px - c[0]) + (a[0] - c[0]) * (py - c[1])) / det;
  return [l0, l1, 1 - l0 - l1];
}

function drawHull() {
  const out = min_norm_point(new Float64Array(grads.flat()));
  const lambda = Array.from(out.slice(0, 3));
  const d = [out[3], out[4]];
  const { ctx, w, h } = hull;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#eee";
  ctx.beginPath();
  ctx.moveTo(0, h / 2); ctx.lineTo(w, h / 2);
  ctx.moveTo(w / 2, 0); ctx.lineTo(w / 2, h);
  ctx.stroke();
  ctx.fillStyle = "rgba(0, 0, 0, 0.06)";
  ctx.beginPath();
  grads.forEach((g, i) => (i ? ctx.lineTo(...toHull(g)) : ctx.moveTo(...toHull(g))));
  ctx.closePath();
  ctx.fill();
  grads.forEach((g, i) => arrow(ctx, w / 2, h / 2, ...toHull(g), COLORS[i]));
  arrow(ctx, w / 2, h / 2, ...toHull(d), "#222");
  dot(ctx, ...toHull(d), 4, "#222");

  const s = simplex.ctx;
  s.clearRect(0, 0, simplex.w, simplex.h);
  s.strokeStyle = "#888";
  s.beginPath();
  VERTS.forEach((v, i) => (i ? s.lineTo(...v) : s.moveTo(...v)));
  s.closePath();
  s.stroke();
  VERTS.forEach((v, i) => dot(s, ...v, 6, COLORS[i]));
  dot(s, ...toTriangle(lambda), 5, "#222");
  if (clicked) {
    const p = Array.from(simplex_projection(new Float64Array(clicked)));
    s.setLineDash([4, 4]);
    s.strokeStyle = "#555";
    s.beginPath();
    s.moveTo(...toTriangle(clicked));
    s.lineTo(...toTriangle(p));
    s.stroke();
    s.setLineDash([]);
    dot(s, ...toTriangle(clicked), 4, "#999");
    dot(s, ...toTriangle(p), 4, "#555");
  }
  document.getElementById("hull-readout").textContent =
    `λ = (${lambda.map((x) => x.toFixed(3)).join(", ")}), ‖d‖ = ${Math.hypot(...d).toFixed(4)}`;
}

hull.c.addEventListener("mousedown", (e) => {
  const p = [e.offsetX, e.offsetY];
  dragging = grads.findIndex((g) => Math.hypot(...toHull(g).map((v, k) => v - p[k])) < 12);
});
hull.c.addEventListener("mousemove", (e) => {
  if (dragging < 0) return;
  grads[dragging] = fromHull(e.offsetX, e.offsetY);
  drawHull();
});
window.addEventListener("mouseup", () => (dragging = -1));
simplex.c.addEventListener("click", (e) => {
  clicked = barycentric(e.offsetX, e.offsetY);
  drawHull();
});

// Two quadratics ----------------------------------------------------------

const paths = ctx2d("paths");
const pathsLambda = ctx2d("paths-lambda");
const STEPS = 400;
let start = [0.3, 1.6];
const PATH_SCALE = 100;
const toPlane = ([x, y]) => [paths.w / 2 + PATH_SCALE * x, paths.h / 2 - PATH_SCALE * y];

function polyline(ctx, pts, color) {
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  pts.forEach((p, i) => (i ? ctx.lineTo(...p) : ctx.moveTo(...p)));
  ctx.stroke();
}

function drawPaths() {
  const h2 = +document.getElementById("h2").value;
  const beta = +document.getElementById("beta").value;
  document.getElementById("h2-out").textContent = h2.toFixed(1);
  document.getElementById("beta-out").textContent = beta.toFixed(2);
  const out = quadratic_paths(h2, beta, start[0], start[1], STEPS);
  const n = STEPS + 1;
  const pts = (off) => Array.from({ length: n }, (_, i) => toPlane([out[off + 2 * i], out[off + 2 * i + 1]]));
  const { ctx, w, h } = paths;
  ctx.clearRect(0, 0, w, h);
  polyline(ctx, [toPlane([1, 0]), toPlane([-1, 0])], "#ddd");
  dot(ctx, ...toPlane([1, 0]), 5, COLORS[0]);
  dot(ctx, ...toPlane([-1, 0]), 5, COLORS[1]);
  polyline(ctx, pts(0), "#999");
  polyline(ctx, pts(2 * n), "#1f6fb2");
  dot(ctx, ...toPlane(start), 4, "#222");

  const l = pathsLambda;
  l.ctx.clearRect(0, 0, l.w, l.h);
  l.ctx.strokeStyle = "#eee";
  l.ctx.strokeRect(30, 20, l.w - 50, l.h - 50);
  const weights = out.slice(4 * n);
  const pt = (i, v) => [30 + ((l.w - 50) * i) / STEPS, 20 + (l.h - 50) * (1 - v)];
  polyline(l.ctx, Array.from(weights, (v, i) => pt(i, v)), "#1f6fb2");
  l.ctx.fillStyle = "#444";
  l.ctx.fillText("weight on task 1", 36, 34);
  l.ctx.fillText("1", 18, 24);
  l.ctx.fillText("0", 18, l.h - 28);
  l.ctx.fillText(`step ${STEPS}`, l.w - 70, l.h - 12);
}

paths.c.addEventListener("click", (e) => {
  start = [(e.offsetX - paths.w / 2) / PATH_SCALE, (paths.h / 2 - e.offsetY) / PATH_SCALE];
  drawPaths();
});
["h2", "beta"].forEach((id) => document.getElementById(id).addEventListener("input", drawPaths));

// Dominant task -----------------------------------------------------------

const DOM_STEPS = 600;

function plotSeries(target, series, { log = false } = {}) {
  const { ctx, w, h } = ctx2d(target);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#eee";
  ctx.strokeRect(30, 10, w - 40, h - 40);
  const f = log ? Math.log10 : (v) => v;
  const all = series.flat().map(f).filter(Number.isFinite);
  const lo = log ? Math.min(...all) : 0;
  const hi = log ? Math.max(...all) : 1;
  series.forEach((s, k) =>
    polyline(ctx, s.map((v, i) => [30 + ((w - 40) * i) / (s.length - 1), 10 + (h - 40) * (1 - (f(v) - lo) / (hi - lo || 1))]), COLORS[k]),
  );
  ctx.fillStyle = "#444";
  ctx.fillText(log ? `1e${hi.toFixed(1)}` : "1", 2, 16);
  ctx.fillText(log ? `1e${lo.toFixed(1)}` : "0", 2, h - 30);
}

function runDominance() {
  const scale = +document.getElementById("scale").value;
  const seed = BigInt(Math.max(0, +document.getElementById("seed").value | 0));
  document.getElementById("scale-out").textContent = scale;
  const out = dominance_weights(scale, DOM_STEPS, seed);
  const split = (off) => [0, 1, 2].map((k) => Array.from({ length: DOM_STEPS }, (_, i) => out[off + 3 * i + k]));
  plotSeries("dom-lambda", split(0));
  plotSeries("dom-norms", split(3 * DOM_STEPS), { log: true });
}

document.getElementById("run-dominance").addEventListener("click", runDominance);
document.getElementById("scale").addEventListener("change", runDominance);

await init();
drawHull();
drawPaths();
runDominance();
