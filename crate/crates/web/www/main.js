import init, { synth_rgba, grid_rgba, upsample_rgba, shift_rgba, shift_metrics } from "./pkg/trupnet_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function paint(canvas, w, h, rgba) {
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function drawSynth() {
  const size = num("s-size");
  paint($("s-canvas"), size, size, synth_rgba(size, num("s-seed"), $("s-overlay").checked));
}

function drawUpsample() {
  const [h, w, oh, ow, seed] = ["u-h", "u-w", "u-oh", "u-ow", "u-seed"].map(num);
  try {
    paint($("u-in"), w, h, grid_rgba(h, w, seed));
    paint($("u-out"), ow, oh, upsample_rgba(h, w, oh, ow, seed));
    $("u-err").textContent = "";
  } catch (e) {
    $("u-err").textContent = String(e.message ?? e);
  }
}

const SHIFT_SIZE = 128;
const NAMES = ["dice", "IoU", "recall", "precision", "F2"];

function drawShift() {
  const [seed, dx, dy] = ["m-seed", "m-dx", "m-dy"].map(num);
  paint($("m-canvas"), SHIFT_SIZE, SHIFT_SIZE, shift_rgba(SHIFT_SIZE, seed, dx, dy));
  const m = shift_metrics(SHIFT_SIZE, seed, dx, dy);
  const rows = NAMES.map((n, i) => `<tr><th>${n}</th><td>${m[i].toFixed(4)}</td></tr>`);
  rows.push(`<tr><th>TP / FP / FN</th><td>${m[5]} / ${m[6]} / ${m[7]}</td></tr>`);
  $("m-table").innerHTML = rows.join("");
}

await init();
for (const id of ["s-seed", "s-size", "s-overlay"]) $(id).addEventListener("input", drawSynth);
for (const id of ["u-h", "u-w", "u-oh", "u-ow", "u-seed"]) $(id).addEventListener("input", drawUpsample);
for (const id of ["m-seed", "m-dx", "m-dy"]) $(id).addEventListener("input", drawShift);
drawSynth();
drawUpsample();
drawShift();
