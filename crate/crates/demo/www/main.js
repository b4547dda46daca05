import init, { simulate_paths, asian_curve, term_reserve_curve } from "../pkg/pathreserve_demo.js";

const num = (id) => Number(document.getElementById(id).value);

function frame(canvas, xs, ys) {
  const ctx = canvas.getContext("2d");
  const pad = 36;
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y1 - y0 < 1e-12) { y0 -= 1; y1 += 1; }
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad);
  const sy = (y) => canvas.height - pad - ((y - y0) / (y1 - y0)) * (canvas.height - 2 * pad);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#444";
  ctx.fillText(y1.toFixed(3), 2, pad);
  ctx.fillText(y0.toFixed(3), 2, canvas.height - pad);
  ctx.fillText(x1.toFixed(2), canvas.width - pad, canvas.height - 12);
  return { ctx, sx, sy };
}

function line(g, xs, ys, color, width = 1) {
  g.ctx.strokeStyle = color;
  g.ctx.lineWidth = width;
  g.ctx.beginPath();
  xs.forEach((x, k) => (k ? g.ctx.lineTo(g.sx(x), g.sy(ys[k])) : g.ctx.moveTo(g.sx(x), g.sy(ys[k]))));
  g.ctx.stroke();
}

function dot(g, x, y, color) {
  g.ctx.fillStyle = color;
  g.ctx.beginPath();
  g.ctx.arc(g.sx(x), g.sy(y), 3, 0, 2 * Math.PI);
  g.ctx.fill();
}

function parse(text, canvas) {
  const out = JSON.parse(text);
  if (out.error) {
    const ctx = canvas.getContext("2d");
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.fillStyle = "#b00";
    ctx.fillText(out.error, 10, 20);
    return null;
  }
  return out;
}

function drawPaths() {
  const canvas = document.getElementById("p-canvas");
  const out = parse(simulate_paths(1, num("p-drift"), num("p-vol"), 0.03, 1, 200, num("p-n"),
    document.getElementById("p-measure").value, BigInt(num("p-seed"))), canvas);
  if (!out) return;
  const g = frame(canvas, out.times, out.paths.flat());
  out.paths.forEach((p, k) => line(g, out.times, p, `hsl(${(k * 47) % 360} 60% 45%)`));
}

function drawAsian() {
  const canvas = document.getElementById("a-canvas");
  const out = parse(asian_curve(num("a-rate"), num("a-vol"), 1, 64, 17, num("a-n"), BigInt(num("a-seed"))), canvas);
  if (!out) return;
  const ts = out.rows.map((r) => r.t);
  const all = out.history.concat(out.rows.flatMap((r) => [r.mc - 2 * r.se, r.mc + 2 * r.se]));
  const g = frame(canvas, out.times, all);
  line(g, out.times, out.history, "#bbb");
  line(g, ts, out.rows.map((r) => r.oracle), "#2060c0", 2);
  for (const r of out.rows) {
    line(g, [r.t, r.t], [r.mc - 2 * r.se, r.mc + 2 * r.se], "#c03020");
    dot(g, r.t, r.mc, "#c03020");
  }
}

function drawReserve() {
  const canvas = document.getElementById("t-canvas");
  const out = parse(term_reserve_curve(num("t-mu"), num("t-rate"), num("t-h"), 100), canvas);
  if (!out) return;
  const g = frame(canvas, out.times, out.engine.concat(out.closed_form));
  line(g, out.times, out.engine, "#2060c0", 2);
  out.times.forEach((t, k) => k % 10 === 0 && dot(g, t, out.closed_form[k], "#c03020"));
}

await init();
document.getElementById("p-run").onclick = drawPaths;
document.getElementById("a-run").onclick = drawAsian;
document.getElementById("t-run").onclick = drawReserve;
drawPaths();
drawAsian();
drawReserve();
