import init, { addNoise, psnr, subbandMosaic, Denoiser } from "./pkg/mwdcnn_web.js";

const $ = (id) => document.getElementById(id);
const state = { clean: null, noisy: null, w: 0, h: 0, model: null };

function put(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function status(msg) {
  $("status").textContent = msg;
}

function setClean(rgba, w, h) {
  Object.assign(state, { clean: rgba, w, h, noisy: null });
  put($("clean"), rgba, w, h);
  makeNoisy();
}

function makeNoisy() {
  if (!state.clean) return;
  const { w, h } = state;
  state.noisy = addNoise(state.clean, w, h, Number($("sigma").value), Number($("seed").value));
  put($("noisy"), state.noisy, w, h);
  $("noisy-cap").textContent = `noisy: ${psnr(state.clean, state.noisy, w, h).toFixed(2)} dB`;
  const mosaic = subbandMosaic(state.noisy, w, h);
  put($("bands"), mosaic, w & ~1, h & ~1);
}

function synthetic(w = 128, h = 128) {
  const px = new Uint8Array(w * h * 4);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const inDisc = (x - 44) ** 2 + (y - 52) ** 2 < 900;
      const inBox = x > 70 && x < 115 && y > 20 && y < 100;
      const base = 60 + x * 0.8 + 20 * Math.sin(y / 6);
      const v = inDisc ? 220 : inBox ? 30 + 10 * Math.sin(x / 3) : base;
      const o = (y * w + x) * 4;
      px.set([v, v * 0.9, v * 0.8, 255], o);
    }
  }
  return { px, w, h };
}

function newModel() {
  state.model = new Denoiser(Number($("base").value), Number($("sigma").value), Number($("seed").value));
  status(`new model, ${state.model.paramCount} parameters`);
}

async function main() {
  await init();
  $("sigma").oninput = () => ($("sigma-val").textContent = $("sigma").value);
  $("noise").onclick = makeNoisy;
  $("synthetic").onclick = () => {
    const { px, w, h } = synthetic();
    setClean(px, w, h);
  };
  $("file").onchange = async (e) => {
    const bmp = await createImageBitmap(e.target.files[0]);
    const c = new OffscreenCanvas(bmp.width, bmp.height);
    const ctx = c.getContext("2d");
    ctx.drawImage(bmp, 0, 0);
    setClean(ctx.getImageData(0, 0, bmp.width, bmp.height).data, bmp.width, bmp.height);
  };
  $("new-model").onclick = newModel;
  $("ckpt").onchange = async (e) => {
    const bytes = new Uint8Array(await e.target.files[0].arrayBuffer());
    try {
      state.model = Denoiser.fromCheckpoint(bytes, Number($("sigma").value));
      status(`loaded checkpoint, ${state.model.paramCount} parameters`);
    } catch (err) {
      status(`checkpoint rejected: ${err.message ?? err}`);
    }
  };
  $("train").onclick = () => {
    if (!state.model) newModel();
    const t0 = performance.now();
    const loss = state.model.trainSteps(10);
    status(`step ${state.model.steps}: loss ${loss.toFixed(5)} (${(performance.now() - t0).toFixed(0)} ms)`);
  };
  $("denoise").onclick = () => {
    if (!state.noisy) return;
    if (!state.model) newModel();
    const { w, h } = state;
    const out = state.model.denoise(state.noisy, w, h);
    put($("restored"), out, w, h);
    $("restored-cap").textContent = `denoised: ${psnr(state.clean, out, w, h).toFixed(2)} dB`;
  };
  $("synthetic").click();
}

main();
