import init, { synth_tiles, stain_normalize, roc } from "./pkg/vitmil_web.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, frame) {
  canvas.width = frame.width;
  canvas.height = frame.height;
  const data = new ImageData(new Uint8ClampedArray(frame.rgba), frame.width, frame.height);
  canvas.getContext("2d").putImageData(data, 0, 0);
}

function drawSlide() {
  const seed = Number($("seed").value) >>> 0;
  const grid = Number($("grid").value);
  const positive = $("positive").checked;
  try {
    const tiles = synth_tiles(seed, positive, grid);
    const norm = stain_normalize(seed, positive, grid);
    paint($("tiles"), tiles);
    paint($("normalized"), norm);
    const summary = { ...JSON.parse(tiles.summary), ...JSON.parse(norm.summary) };
    $("slide-summary").textContent = JSON.stringify(summary, null, 2);
  } catch (e) {
    $("slide-summary").textContent = String(e);
  }
}

function drawRoc() {
  const canvas = $("roc");
  const ctx = canvas.getContext("2d");
  const s = canvas.width;
  ctx.clearRect(0, 0, s, s);
  try {
    const result = JSON.parse(roc($("scores").value, $("labels").value));
    ctx.strokeStyle = "#bbb";
    ctx.beginPath();
    ctx.moveTo(0, s);
    ctx.lineTo(s, 0);
    ctx.stroke();
    ctx.strokeStyle = "#c00";
    ctx.lineWidth = 2;
    ctx.beginPath();
    result.points.forEach(([f, t], i) => (i ? ctx.lineTo(f * s, s - t * s) : ctx.moveTo(f * s, s - t * s)));
    ctx.stroke();
    $("roc-summary").textContent = `AUC = ${result.auc.toFixed(4)}`;
  } catch (e) {
    $("roc-summary").textContent = String(e);
  }
}

await init();
$("draw").addEventListener("click", drawSlide);
$("auc").addEventListener("click", drawRoc);
drawSlide();
drawRoc();
