"""Regenerate tests/fixtures/golden_micro.

Parameters come from the network builder and are saved as a checkpoint.
Expected outputs are computed only with the loop oracles in oracles.py.
Run from the repository root:  python tests/make_fixtures.py
"""

from pathlib import Path

import numpy as np

from oracles import bn_eval_ref, conv2d_loops, maxpool_loops, stsm_loops
from stsm.graph import build_network, preset, save_checkpoint
from stsm.tensor import save_tensor

HERE = Path(__file__).parent / "fixtures" / "golden_micro"


def main():
    graph = build_network(preset("micro"), "pattern=T+H+W f=3/4", seed=7)
    rng = np.random.default_rng(11)
    store = graph.params
    for name, buf in store.buffers.items():
        c = buf["running_mean"].size
        buf["running_mean"] = rng.uniform(-0.2, 0.2, c)
        buf["running_var"] = rng.uniform(0.5, 1.5, c)
        store.tensors[name]["weight"] = rng.uniform(0.5, 1.5, c)
        store.tensors[name]["bias"] = rng.uniform(-0.1, 0.1, c)
    store.tensors["head.fc"]["bias"] = rng.uniform(-0.1, 0.1, 4)
    x = rng.uniform(0, 1, (2, 1, 4, 6, 6))

    p, b = store.tensors, store.buffers

    def bn(v, name):
        return bn_eval_ref(v, p[name]["weight"], p[name]["bias"], b[name]["running_mean"], b[name]["running_var"])

    h = conv2d_loops(x, p["stem.conv"]["weight"], None, 1, 1)
    h = np.maximum(bn(h, "stem.bn"), 0)
    h = maxpool_loops(h, 2, 2, 0)
    block_in = h
    spec = graph.layers[4].inner[0].attrs["spec"]
    layout = [((r.start, r.end), g.axes, g.direction) for r, g in spec.layout]
    h = stsm_loops(block_in, layout)
    h = conv2d_loops(h, p["layer1.0.conv1"]["weight"], None, 1, 1)
    h = np.maximum(bn(h, "layer1.0.bn1"), 0)
    h = conv2d_loops(h, p["layer1.0.conv2"]["weight"], None, 1, 1)
    h = bn(h, "layer1.0.bn2")
    block_out = h + block_in
    h = np.maximum(block_out, 0)
    feats = np.zeros(h.shape[:2])
    for n in range(h.shape[0]):
        for c in range(h.shape[1]):
            feats[n, c] = h[n, c].mean()
    logits = feats @ p["head.fc"]["weight"].T + p["head.fc"]["bias"]

    save_checkpoint(graph, HERE / "checkpoint")
    save_tensor(HERE / "input.t5", x)
    save_tensor(HERE / "block_input.t5", block_in)
    save_tensor(HERE / "block_output.t5", block_out)
    save_tensor(HERE / "logits.t5", logits.reshape(1, 1, 1, *logits.shape))


if __name__ == "__main__":
    main()
