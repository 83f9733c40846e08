import init, { encrypt_packet_demo, stop_and_wait_demo, jam_sweep_demo } from "./pkg/otpad_web.js";

const $ = (id) => document.getElementById(id);

function show(id, value) {
  $(id).textContent = JSON.stringify(value, null, 2);
}

await init();

$("encrypt").onclick = () => {
  show("encrypt-out", JSON.parse(encrypt_packet_demo($("text").value, Number($("seed").value) >>> 0)));
};

$("transfer").onclick = () => {
  const r = JSON.parse(stop_and_wait_demo(Number($("bytes").value), Number($("rtt").value), Number($("loss").value)));
  show("transfer-out", r);
};

$("jam").onclick = () => {
  const freqs = new Float64Array($("jam-freqs").value.split(",").map(Number).filter((f) => f >= 0));
  const rows = JSON.parse(jam_sweep_demo(Number($("jam-len").value), freqs));
  const head = "<tr><th>Hz</th><th>CPU</th><th>goodput kbit/s</th><th>time s</th><th>drops</th><th>false accepts</th></tr>";
  $("jam-out").innerHTML = head + rows.map((r) =>
    `<tr><td>${r.jam_hz}</td><td>${(r.cpu_fraction * 100).toFixed(0)}%</td><td>${r.goodput_kbps.toFixed(1)}</td>` +
    `<td>${r.tx_time === null ? "unfinished" : r.tx_time.toFixed(1)}</td><td>${r.dropped}</td><td>${r.false_accepts}</td></tr>`
  ).join("");
};
