import init, { Explorer, rubricItemsJson, scoreRubricJson, metricsJson } from "./pkg/asag_demo.js";

const $ = (id) => document.getElementById(id);
let explorer = null;

function cell(row, text) {
  const td = document.createElement("td");
  td.textContent = text;
  row.appendChild(td);
}

function openDataset() {
  explorer?.free();
  explorer = new Explorer($("dataset").value);
  const info = JSON.parse(explorer.submissionsJson());
  const select = $("target");
  select.replaceChildren();
  for (const s of info.submissions) {
    const opt = document.createElement("option");
    opt.value = s.id;
    opt.textContent = `${s.id} (${s.question_id}, gold ${s.gold_percent.toFixed(0)}%)`;
    opt.dataset.text = s.text;
    select.appendChild(opt);
  }
  $("rubric").disabled = !info.has_rubric;
  if (!info.has_rubric) $("rubric").checked = false;
  preview();
}

function preview() {
  const body = $("examples").querySelector("tbody");
  body.replaceChildren();
  const opt = $("target").selectedOptions[0];
  $("target-text").textContent = opt ? opt.dataset.text : "";
  try {
    const v = JSON.parse(explorer.previewJson(
      $("target").value, $("strategy").value,
      Number($("k").value), Number($("seed").value), $("rubric").checked));
    for (const e of v.examples) {
      const row = body.insertRow();
      cell(row, e.id);
      cell(row, e.gold_percent.toFixed(1));
      cell(row, e.distance == null ? "" : e.distance.toFixed(4));
      cell(row, e.text);
    }
    const chars = Array.from(v.prompt);
    const pre = $("prompt");
    pre.replaceChildren();
    let at = 0;
    for (const span of v.spans) {
      if (span.start > at) pre.append(chars.slice(at, span.start).join(""));
      const el = document.createElement("span");
      el.className = `c-${span.component}`;
      el.textContent = chars.slice(span.start, span.start + span.len).join("");
      pre.appendChild(el);
      at = span.start + span.len;
    }
    pre.append(chars.slice(at).join(""));
    $("status").textContent = v.short_pool ? "Fewer candidates than k: the whole pool was used." : "";
    $("status").className = "muted";
  } catch (err) {
    $("prompt").textContent = "";
    $("status").textContent = String(err);
    $("status").className = "error";
  }
}

function buildRubric() {
  const body = $("rubric-items").querySelector("tbody");
  for (const item of JSON.parse(rubricItemsJson())) {
    const row = body.insertRow();
    const met = document.createElement("input");
    met.type = "checkbox";
    met.className = "met";
    row.insertCell().appendChild(met);
    const name = row.insertCell();
    name.textContent = `R${item.number}. ${item.name}`;
    name.title = item.explanation;
    const weight = document.createElement("input");
    weight.type = "number";
    weight.className = "weight";
    weight.min = "0";
    weight.step = "0.5";
    weight.value = item.weight;
    row.insertCell().appendChild(weight);
  }
  body.addEventListener("input", scoreRubric);
  scoreRubric();
}

function scoreRubric() {
  const rows = $("rubric-items").querySelectorAll("tbody tr");
  const selected = Uint8Array.from(rows, (r) => (r.querySelector(".met").checked ? 1 : 0));
  const weights = Float64Array.from(rows, (r) => Number(r.querySelector(".weight").value));
  try {
    const v = JSON.parse(scoreRubricJson(selected, weights));
    $("rubric-score").textContent = `${v.score.toFixed(2)} / 100`;
  } catch (err) {
    $("rubric-score").textContent = String(err);
  }
}

function updateMetrics() {
  try {
    const v = JSON.parse(metricsJson($("pairs").value));
    const q = v.abs_error_quartiles;
    const r = v.pearson_r == null ? `undefined (${v.pearson_note})` : v.pearson_r.toFixed(4);
    $("metrics").textContent = [
      `pairs           ${v.n}`,
      `RMSE            ${v.rmse.toFixed(4)}`,
      `Pearson r       ${r}`,
      `mean |error|    ${v.mean_abs_error.toFixed(4)}`,
      `|error| min/Q1/median/Q3/max`,
      `                ${[q.min, q.q1, q.median, q.q3, q.max].map((x) => x.toFixed(2)).join(" / ")}`,
    ].join("\n");
    $("metrics").className = "";
  } catch (err) {
    $("metrics").textContent = String(err);
    $("metrics").className = "error";
  }
}

await init();
$("status").textContent = "";
for (const id of ["target", "strategy", "k", "seed", "rubric"]) $(id).addEventListener("change", preview);
$("dataset").addEventListener("change", openDataset);
$("pairs").addEventListener("input", updateMetrics);
openDataset();
buildRubric();
updateMetrics();
