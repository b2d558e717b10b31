import init, { cra_mask, set_permutation_deviation, cmc_curve } from "./pkg/cra_kit_demo.js";

const $ = (id) => document.getElementById(id);

function drawMask() {
  const order = $("order").value;
  const d = Number($("d").value);
  const seed = BigInt($("mask-seed").value || 0);
  const m = cra_mask(order, d, seed);
  const lo = Math.min(...m), hi = Math.max(...m);
  const ctx = $("mask").getContext("2d");
  const img = ctx.createImageData(16, 32);
  m.forEach((v, i) => {
    const g = hi > lo ? Math.round(255 * (v - lo) / (hi - lo)) : 0;
    img.data.set([g, g, g, 255], 4 * i);
  });
  ctx.putImageData(img, 0, 0);
  $("mask-range").textContent = `mask mean range [${lo.toFixed(4)}, ${hi.toFixed(4)}]`;
}

function runPermutation() {
  const t = Number($("t").value);
  const trials = Number($("trials").value);
  const dev = set_permutation_deviation(t, 16, trials, 7n);
  $("perm-out").textContent = `max |g(F) − g(πF)| = ${dev.toExponential(3)}`;
}

function drawCmc() {
  const noise = Number($("noise").value);
  $("noise-val").textContent = noise.toFixed(2);
  const ranks = 20;
  const out = cmc_curve(noise, 40, ranks, 1n);
  const cmc = out.slice(0, ranks), map = out[ranks];
  const c = $("cmc"), ctx = c.getContext("2d");
  const W = c.width, H = c.height, pad = 24;
  ctx.clearRect(0, 0, W, H);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 4, W - pad - 4, H - pad - 4);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  cmc.forEach((v, i) => {
    const x = pad + (i / (ranks - 1)) * (W - pad - 4);
    const y = 4 + (1 - v) * (H - pad - 4);
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.fillText("rank 1", pad, H - 6);
  ctx.fillText(`rank ${ranks}`, W - 50, H - 6);
  $("cmc-out").textContent = `R-1 ${(100 * cmc[0]).toFixed(1)}%  R-5 ${(100 * cmc[4]).toFixed(1)}%  mAP ${(100 * map).toFixed(1)}%`;
}

await init();
["order", "d", "mask-seed"].forEach((id) => $(id).addEventListener("input", drawMask));
$("perm-run").addEventListener("click", runPermutation);
$("noise").addEventListener("input", drawCmc);
drawMask();
runPermutation();
drawCmc();
