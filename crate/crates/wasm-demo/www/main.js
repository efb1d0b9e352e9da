import init, { project_2d, distance_2d, TreeDemo, SsdDemo } from "./pkg/him_demo.js";

const $ = (id) => document.getElementById(id);

function fail(where, e) {
  where.textContent = String(e);
  where.className = "err";
}

// projection

const pooled = [[0.8, 0.4], [-0.5, 0.9]];
const POOL_RANGE = 3;

function toCanvas(cv, x, y, range) {
  return [cv.width / 2 + (x / range) * cv.width / 2, cv.height / 2 - (y / range) * cv.height / 2];
}

function drawProjection() {
  const c = Math.pow(10, +$("c").value);
  const gamma = +$("gamma").value;
  $("cval").textContent = c.toFixed(3);
  $("gval").textContent = gamma.toFixed(2);

  const pool = $("pool").getContext("2d");
  pool.clearRect(0, 0, 260, 260);
  pool.strokeStyle = "#ddd";
  pool.beginPath();
  pool.moveTo(130, 0); pool.lineTo(130, 260); pool.moveTo(0, 130); pool.lineTo(260, 130);
  pool.stroke();
  pooled.forEach(([x, y], i) => {
    const [px, py] = toCanvas($("pool"), x, y, POOL_RANGE);
    pool.fillStyle = i === 0 ? "#000" : "#888";
    pool.beginPath(); pool.arc(px, py, 5, 0, 2 * Math.PI); pool.fill();
  });

  const disk = $("disk").getContext("2d");
  disk.clearRect(0, 0, 260, 260);
  disk.strokeStyle = "#999";
  disk.beginPath(); disk.arc(130, 130, 125, 0, 2 * Math.PI); disk.stroke();
  const lines = [];
  try {
    for (const [kind, color] of [["poincare", "#1f5fbf"], ["lorentz", "#c0392b"]]) {
      pooled.forEach(([x, y], i) => {
        const p = project_2d(kind, x, y, c, gamma);
        disk.fillStyle = color;
        disk.globalAlpha = i === 0 ? 1 : 0.45;
        disk.beginPath(); disk.arc(130 + p[0] * 125, 130 - p[1] * 125, 5, 0, 2 * Math.PI); disk.fill();
        if (i === 0) lines.push(`${kind.padEnd(9)} h_norm ${p[2].toFixed(4)}`);
      });
      lines.push(`${"".padEnd(9)} d(s1, s2) ${distance_2d(kind, pooled[0], pooled[1], c, gamma).toFixed(4)}`);
    }
    disk.globalAlpha = 1;
    $("proj").textContent = lines.join("\n");
    $("proj").className = "";
  } catch (e) {
    fail($("proj"), e);
  }
}

$("pool").addEventListener("click", (ev) => {
  const r = ev.target.getBoundingClientRect();
  const x = ((ev.clientX - r.left) / r.width * 2 - 1) * POOL_RANGE;
  const y = -((ev.clientY - r.top) / r.height * 2 - 1) * POOL_RANGE;
  pooled[ev.shiftKey ? 1 : 0] = [x, y];
  drawProjection();
});
$("c").addEventListener("input", drawProjection);
$("gamma").addEventListener("input", drawProjection);

// tree δ

let tree = null;
let layout = [];
let picked = null;

function layoutTree() {
  const parents = tree.parents();
  const depths = tree.depths();
  const maxDepth = Math.max(...depths);
  const children = parents.map(() => []);
  parents.forEach((p, v) => { if (p >= 0) children[p].push(v); });
  const pos = new Array(parents.length);
  let nextLeaf = 0;
  const leaves = parents.filter((_, v) => children[v].length === 0).length;
  const place = (v) => {
    let x;
    if (children[v].length === 0) {
      x = (nextLeaf++ + 0.5) / leaves;
    } else {
      const xs = children[v].map(place);
      x = (xs[0] + xs[xs.length - 1]) / 2;
    }
    pos[v] = [20 + x * 520, 20 + (depths[v] / maxDepth) * 260];
    return x;
  };
  place(0);
  return pos;
}

function drawTree() {
  const ctx = $("tree").getContext("2d");
  ctx.clearRect(0, 0, 560, 300);
  const parents = tree.parents();
  ctx.strokeStyle = "#999";
  parents.forEach((p, v) => {
    if (p < 0) return;
    ctx.beginPath(); ctx.moveTo(...layout[v]); ctx.lineTo(...layout[p]); ctx.stroke();
  });
  const extra = tree.extra_edges();
  ctx.strokeStyle = "#c0392b";
  for (let i = 0; i < extra.length; i += 2) {
    ctx.beginPath(); ctx.moveTo(...layout[extra[i]]); ctx.lineTo(...layout[extra[i + 1]]); ctx.stroke();
  }
  layout.forEach(([x, y], v) => {
    ctx.fillStyle = v === picked ? "#c0392b" : "#1f5fbf";
    ctx.beginPath(); ctx.arc(x, y, 4, 0, 2 * Math.PI); ctx.fill();
  });
  try {
    const exact = tree.delta_exact();
    const sampled = tree.delta(20000n, 7n);
    $("delta").textContent =
      `nodes ${tree.len()}, extra edges ${extra.length / 2}\n` +
      `exact    δ ${exact[0].toFixed(4)}  normalized ${exact[1].toFixed(4)}\n` +
      `sampled  δ ${sampled[0].toFixed(4)}  normalized ${sampled[1].toFixed(4)}  (${sampled[2]} quadruples)`;
    $("delta").className = "";
  } catch (e) {
    fail($("delta"), e);
  }
}

function newTree() {
  try {
    if (tree) tree.free();
    tree = new TreeDemo(+$("branching").value, +$("depth").value, BigInt(+$("tseed").value));
    layout = layoutTree();
    picked = null;
    drawTree();
  } catch (e) {
    fail($("delta"), e);
  }
}

$("tree").addEventListener("click", (ev) => {
  const r = ev.target.getBoundingClientRect();
  const x = ev.clientX - r.left;
  const y = ev.clientY - r.top;
  let best = -1;
  let bestD = 100;
  layout.forEach(([px, py], v) => {
    const d = (px - x) ** 2 + (py - y) ** 2;
    if (d < bestD) { best = v; bestD = d; }
  });
  if (best < 0) return;
  if (picked === null) {
    picked = best;
  } else {
    tree.add_edge(picked, best);
    picked = null;
  }
  drawTree();
});
$("regen").addEventListener("click", newTree);
$("clear").addEventListener("click", () => { tree.clear_extra(); drawTree(); });

// scan vs dual

function drawSsd() {
  const len = +$("len").value;
  const decay = +$("decay").value;
  $("lval").textContent = len;
  $("dval").textContent = decay.toFixed(2);
  let demo;
  try {
    demo = new SsdDemo(len, 8, 4, decay, BigInt(+$("sseed").value));
  } catch (e) {
    fail($("ssd"), e);
    return;
  }
  const m = demo.matrix();
  const peak = m.reduce((a, v) => Math.max(a, Math.abs(v)), 1e-12);
  const ctx = $("heat").getContext("2d");
  const img = ctx.createImageData(len, len);
  for (let i = 0; i < len * len; i++) {
    const v = m[i] / peak;
    const k = Math.round(255 * (1 - Math.abs(v)));
    img.data.set(v >= 0 ? [255, k, k, 255] : [k, k, 255, 255], 4 * i);
  }
  const off = new OffscreenCanvas(len, len);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, 300, 300);
  ctx.drawImage(off, 0, 0, 300, 300);
  $("ssd").textContent =
    `L ${len}, N 8, P 4\nmax |scan − dual| ${demo.max_deviation().toExponential(2)}`;
  $("ssd").className = "";
  demo.free();
}

for (const id of ["len", "decay", "sseed"]) $(id).addEventListener("input", drawSsd);

await init();
$("status").textContent = "";
drawProjection();
newTree();
drawSsd();
