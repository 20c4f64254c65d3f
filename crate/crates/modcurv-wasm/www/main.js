import init, { kernelCurve, curvatureHeatmap, heisenbergView } from "./pkg/modcurv_wasm.js";

const THETA = (Math.sqrt(5) - 1) / 2;
const TAU = [0.3, 1.1];
const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);

function call(fn, out) {
  const r = JSON.parse(fn());
  if (r.error) {
    out.textContent = r.error;
    out.classList.add("err");
    return null;
  }
  out.classList.remove("err");
  return r;
}

function plotLines(canvas, xs, series) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 30;
  ctx.clearRect(0, 0, w, h);
  const finite = series.flatMap((s) => s.ys).filter(Number.isFinite);
  let lo = Math.min(...finite), hi = Math.max(...finite);
  if (hi - lo < 1e-12) { lo -= 1; hi += 1; }
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const X = (x) => pad + ((x - x0) / (x1 - x0)) * (w - 2 * pad);
  const Y = (y) => h - pad - ((y - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(pad, Y(Math.min(Math.max(0, lo), hi)));
  ctx.lineTo(w - pad, Y(Math.min(Math.max(0, lo), hi)));
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.fillText(hi.toPrecision(4), 2, pad - 4);
  ctx.fillText(lo.toPrecision(4), 2, h - pad + 12);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    let pen = false;
    xs.forEach((x, i) => {
      const y = s.ys[i];
      if (!Number.isFinite(y)) { pen = false; return; }
      if (pen) ctx.lineTo(X(x), Y(y)); else ctx.moveTo(X(x), Y(y));
      pen = true;
    });
    ctx.stroke();
  }
}

function drawKernels() {
  const a = num("k-a"), b = num("k-b");
  const r = call(() => kernelCurve($("k-which").value, a, b, 600, num("k-off")), $("k-out"));
  if (!r) return;
  plotLines($("k-canvas"), r.s, [{ ys: r.values, color: "#1f5fbf" }]);
  const mid = r.values[Math.floor(r.values.length / 2)];
  $("k-out").textContent = `${r.kernel} on [${a}, ${b}], value near the middle ${mid.toPrecision(8)}`;
}

function drawCurvature() {
  const res = 64;
  const r = call(
    () => curvatureHeatmap(THETA, TAU[0], TAU[1], num("c-scale"), num("c-a"), num("c-b"), num("c-c"), num("c-n") | 0, res),
    $("c-out"),
  );
  if (!r) return;
  const cv = $("c-canvas"), ctx = cv.getContext("2d");
  const img = ctx.createImageData(res, res);
  const m = Math.max(1e-15, ...r.values.map(Math.abs));
  r.values.forEach((v, i) => {
    const u = v / m;
    img.data[4 * i] = u > 0 ? 255 : Math.round(255 * (1 + u));
    img.data[4 * i + 1] = Math.round(255 * (1 - Math.abs(u)));
    img.data[4 * i + 2] = u < 0 ? 255 : Math.round(255 * (1 - u));
    img.data[4 * i + 3] = 255;
  });
  const tmp = new OffscreenCanvas(res, res);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, cv.width, cv.height);
  $("c-out").textContent =
    `max |K| on the sample grid ${m.toExponential(3)}, ` +
    `Gauss–Bonnet residual ${r.gauss_bonnet_residual.toExponential(2)}, ${r.terms} Fourier terms`;
}

function drawHeisenberg() {
  $("h-out").textContent = "computing…";
  setTimeout(() => {
    const r = call(
      () => heisenbergView(THETA, TAU[0], TAU[1], parseInt($("h-c").value), num("h-points") | 0, num("h-scale"), 24),
      $("h-out"),
    );
    if (!r) return;
    plotLines($("h-canvas"), r.t, [
      { ys: r.trace, color: "#1f5fbf" },
      { ys: r.flat_trace, color: "#c05010" },
    ]);
    const ev = r.eigenvalues.map((x) => (x / r.ladder_spacing).toFixed(4)).join(" ");
    $("h-out").textContent =
      `eigenvalues / ladder spacing (${r.ladder_spacing.toPrecision(6)}): ${ev}\n` +
      `fitted a0 ${r.a0.toPrecision(6)}, a2 ${r.a2.toPrecision(6)}; blue: heat trace, orange: flat closed form`;
  }, 10);
}

await init();
$("status").textContent = `θ = ${THETA.toFixed(6)}, τ = ${TAU[0]} + ${TAU[1]}i`;
for (const id of ["k-which", "k-a", "k-b", "k-off"]) $(id).addEventListener("input", drawKernels);
for (const id of ["c-scale", "c-a", "c-b", "c-c", "c-n"]) $(id).addEventListener("input", drawCurvature);
$("h-run").addEventListener("click", drawHeisenberg);
drawKernels();
drawCurvature();
drawHeisenberg();
