"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear at the
end of the session. The end-to-end criteria share one micro-benchmark run.
"""
import itertools
import math
import time

import numpy as np
import pytest

from twostream.config import ExperimentConfig
from twostream.experiment import ExperimentResult, format_report, run_experiment
from twostream.motion import FlowField, dense_flow, directional_maps
from twostream.retina import DoGParams, build_dog_kernel, decode_first_spike, dog_filter, encode_clip, latency_encode
from twostream import snn
from twostream.snn import LayerConfig, SpikingConvLayer, forward_times, stdp_delta, train_layer
from twostream.video import VideoTensor, generate_synthetic

from helpers import record

MICRO_BENCHMARK = """
experiment.name = micro-benchmark
experiment.runs = 3
experiment.seeds = 1, 2, 3
dataset.kind = synthetic
dataset.classes = bar-left, bar-right, bar-up, bar-down
dataset.textures = A, B
dataset.n_per_class = 30
layer.filters = 16
spatial.kind = raw
spatial.conv = 2d
temporal.kind = frame-subtraction
"""


def accuracies(result: ExperimentResult, column: str) -> list[float]:
    return result.report(column).accuracies


@pytest.fixture(scope="module")
def micro():
    """Criterion-9 experiment: result, report text and wall-clock seconds."""
    cfg = ExperimentConfig.from_text(MICRO_BENCHMARK)
    start = time.perf_counter()
    result = run_experiment(cfg)
    return result, format_report(result), time.perf_counter() - start


def test_1_codec_round_trip():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    x = (1.0 - rng.uniform(0.0, 1.0, size=10_000)).astype(np.float32)  # (0, 1]
    x[::1000] = 1.0
    values = np.concatenate([x, [0.0]]).astype(np.float32).reshape(1, 1, 1, -1)
    spikes = latency_encode(VideoTensor(values))
    decoded = decode_first_spike(spikes)[0, 0, 0]
    elapsed = time.perf_counter() - start
    err = np.abs(decoded[:-1] - x.astype(np.float64)).max()
    ok = err < 1e-9 and decoded[-1] == 0.0 and len(spikes) == 10_000 and elapsed < 1.0
    assert record(1, ok, f"max error {err:.2e}, zero -> {decoded[-1]}, {elapsed:.3f} s")


def test_2_dog_correctness():
    kernel_sum = abs(build_dog_kernel(DoGParams(7, 1.0, 4.0)).sum())
    flat = all(not np.any(dog_filter(np.full((24, 24), v))) for v in (0.0, 0.25, 0.5, 1.0))
    rng = np.random.default_rng(2)
    disjoint = 0
    for _ in range(100):
        on, off = dog_filter(rng.uniform(size=(rng.integers(8, 40), rng.integers(8, 40))))
        disjoint += int(not np.any(on * off))
    ok = kernel_sum < 1e-9 and flat and disjoint == 100
    assert record(2, ok, f"|sum K| = {kernel_sum:.1e}, constant response zero: {flat}, on*off = 0 on {disjoint}/100")


def test_3_stdp_oracle():
    equal = float(stdp_delta(0.4, 0.4))
    at_tau = float(stdp_delta(0.3, 0.4))
    gaps = np.linspace(-1.0, 1.0, 1000)  # t_post - t_pre
    t_post = 1.0
    grid = stdp_delta(t_post - gaps, t_post)
    pot = gaps >= 0
    signs = np.all(grid[pot] > 0) and np.all(grid[~pot] < 0) and np.all(np.abs(grid) <= 0.1)
    # potentiation shrinks as the gap grows; depression weakens as the gap grows
    mono = np.all(np.diff(grid[pot]) < 0) and np.all(np.diff(grid[~pot]) < 0)
    ok = equal == 0.1 and abs(at_tau - 0.1 * math.exp(-1)) < 1e-12 and signs and mono
    assert record(3, ok, f"dw(0) = {equal!r}, dw(tau) = {at_tau:.15f}, sign ok {signs}, monotone {mono}")


def scalar_neuron(times, weights, threshold, presentations, target=0.65, eta=0.1, tau=0.1, eta_th=1.0,
                  th_min=1.0, t_exposition=1.0):
    """One IF neuron trained on one repeated patch, simulated with plain floats."""
    w = list(weights)
    order = sorted(range(len(times)), key=lambda i: (times[i], i))
    fires = []
    for _ in range(presentations):
        v, t_fire = 0.0, None
        for i in order:
            if math.isinf(times[i]):
                break
            v += w[i]
            if v >= threshold:
                t_fire = times[i]
                break
        fires.append(t_fire)
        if t_fire is None:
            continue
        for i, t_pre in enumerate(times):
            if not math.isinf(t_pre) and t_pre <= t_fire:
                dw = eta * math.exp(-(t_fire - t_pre) / tau)
            else:
                pre = t_exposition if math.isinf(t_pre) else t_pre
                dw = -eta * math.exp(-(pre - t_fire) / tau)
            w[i] = min(1.0, max(0.0, w[i] + dw))
        # a lone neuron has no competitors, so only the timing term applies
        threshold = max(th_min, threshold - eta_th * (t_fire - target))
    return fires


def test_4_homeostasis_convergence():
    start = time.perf_counter()
    _, clips = generate_synthetic(1, ["bar-right"], 7)
    patch = encode_clip(clips["bar-right_0000"]).time_map()[3, :, 10:15, 10:15]
    layer = SpikingConvLayer(LayerConfig(kernel=(5, 5, 1), filters=1), 0)
    w0, th0 = layer.weight_matrix[0].copy(), float(layer.thresholds[0])
    fires = []
    for _ in range(5000):
        out = snn.present_patch(layer, patch)
        fires.append(None if out is None else out[1])
    reference = scalar_neuron(patch.ravel().tolist(), w0.tolist(), th0, 5000)
    elapsed = time.perf_counter() - start
    agree = all((a is None) == (b is None) and (a is None or abs(a - b) < 1e-12) for a, b in zip(fires, reference))
    tail = [t for t in fires[-100:] if t is not None]
    mean_t = float(np.mean(tail)) if tail else math.inf
    ok = agree and len(tail) == 100 and abs(mean_t - 0.65) <= 0.05 and elapsed < 10
    assert record(4, ok, f"mean fire time over last 100 = {mean_t:.4f}, matches scalar simulation {agree}, "
                         f"{elapsed:.2f} s")


def test_5_wta_exclusivity(monkeypatch):
    _, clips = generate_synthetic(10, ["bar-left", "bar-right", "bar-up", "bar-down"], 3)
    maps = [encode_clip(c).time_map() for c in clips.values()]
    log = []
    original = snn.present_patch

    def counted(layer, patch_times):
        before = (layer.stats.fired, layer.stats.stdp_updates, layer.weights.copy())
        out = original(layer, patch_times)
        changed_rows = int(np.any(layer.weights != before[2], axis=(1, 2, 3, 4)).sum())
        log.append((layer.stats.fired - before[0], layer.stats.stdp_updates - before[1], out is not None,
                    changed_rows))
        return out

    monkeypatch.setattr(snn, "present_patch", counted)
    layer = SpikingConvLayer(LayerConfig(kernel=(5, 5, 1), filters=16), 4)
    train_layer(layer, maps, patches_per_clip=20)
    bad = [e for e in log if e[1] != (1 if e[2] else 0) or e[0] != e[1] or e[3] > e[1]]
    fired = sum(e[0] for e in log)
    ok = not bad and fired > 0 and layer.stats.stdp_updates == layer.stats.fired == fired
    assert record(5, ok, f"{len(log)} patches, {fired} fired, {layer.stats.stdp_updates} STDP updates, "
                         f"{len(bad)} violations")


def test_6_shape_contract():
    rng = np.random.default_rng(6)
    layers = {}
    for f_w, f_h, f_td in itertools.product((3, 5), (3, 5), (1, 2)):
        for stride in itertools.product((1, 2), repeat=3):
            cfg = LayerConfig(kernel=(f_w, f_h, f_td), filters=1, stride=stride, in_channels=1)
            layers[cfg.kernel, stride] = SpikingConvLayer(cfg, 0)
    checked = mismatches = 0
    for w, h, d in itertools.product(range(5, 16), repeat=3):
        tm = np.where(rng.uniform(size=(d, 1, h, w)) < 0.5, rng.uniform(size=(d, 1, h, w)), np.inf)
        for ((f_w, f_h, f_td), (s_x, s_y, s_t)), layer in layers.items():
            want = ((d - f_td) // s_t + 1, 1, (h - f_h) // s_y + 1, (w - f_w) // s_x + 1)
            checked += 1
            mismatches += forward_times(tm, layer).shape != want
    ok = mismatches == 0 and checked == 11 ** 3 * 64
    assert record(6, ok, f"{checked} (input, kernel, stride) cases, {mismatches} mismatches")


def test_7_motion_grid_identities():
    rng = np.random.default_rng(7)
    failures = 0
    for _ in range(100):
        h, w = rng.integers(4, 40, size=2)
        flow = FlowField(rng.normal(0, 3, size=(h, w)), rng.normal(0, 3, size=(h, w)))
        m_l, m_r, m_u, m_d = directional_maps(flow)
        failures += not (np.array_equal(m_r - m_l, flow.dx) and not np.any(m_l * m_r) and not np.any(m_u * m_d))
    assert record(7, failures == 0, f"{100 - failures}/100 random flow fields satisfy all three identities")


def test_8_flow_sanity():
    from scipy import ndimage

    noise = np.random.default_rng(8).uniform(size=(64, 64))
    tex = ndimage.gaussian_filter(noise, 1.5)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    a, b = tex[4:-4, 4:-4], tex[4:-4, 3:-5]  # b is a moved one pixel right
    flow = dense_flow(a, b)
    inner = (slice(8, -8), slice(8, -8))
    med_x = float(np.median(flow.dx[inner]))
    med_y = float(np.median(np.abs(flow.dy[inner])))
    ok = 0.8 <= med_x <= 1.2 and med_y < 0.2
    assert record(8, ok, f"median OF_x = {med_x:.4f}, median |OF_y| = {med_y:.4f}")


def test_9_two_stream_micro_benchmark(micro):
    result, _, elapsed = micro
    sp, tp, fu = (accuracies(result, c) for c in ("spatial", "temporal", "fused"))
    per_run = [s >= 40 and t >= 85 and f >= max(s, t) - 2 for s, t, f in zip(sp, tp, fu)]
    ok = all(per_run) and len(per_run) == 3 and elapsed < 600
    runs = "; ".join(f"run {i + 1}: spatial {s:.2f} temporal {t:.2f} fused {f:.2f}"
                     for i, (s, t, f) in enumerate(zip(sp, tp, fu)))
    assert record(9, ok, f"{runs}; {elapsed:.0f} s")


def test_10_redundancy_trend(micro):
    result, _, _ = micro
    cfg = ExperimentConfig.from_text(MICRO_BENCHMARK, {"temporal.kind": "conv3d"})
    raw3d = run_experiment(cfg)
    gain_3d = np.mean(accuracies(raw3d, "fused")) - np.mean(accuracies(raw3d, "temporal"))
    gain_fs = np.mean(accuracies(result, "fused")) - np.mean(accuracies(result, "temporal"))
    ok = gain_3d <= gain_fs
    assert record(10, ok, f"fusion gain over raw 3D {gain_3d:+.2f} <= over frame subtraction {gain_fs:+.2f}")


def test_11_cutoff_information_loss():
    noisy = {"dataset.dynamic_noise": "0.2"}
    base = run_experiment(ExperimentConfig.from_text(MICRO_BENCHMARK, {**noisy, "codec.cutoff": "0"}))
    cut = run_experiment(ExperimentConfig.from_text(MICRO_BENCHMARK, {**noisy, "codec.cutoff": "20"}))
    parts, ok = [], True
    for column in ("spatial", "temporal"):
        a0, a20 = np.mean(accuracies(base, column)), np.mean(accuracies(cut, column))
        ok &= a20 <= a0 + 2
        parts.append(f"{column} {a20:.2f} at cutoff 20 vs {a0:.2f} at cutoff 0")
    assert record(11, bool(ok), "; ".join(parts))


def test_12_determinism(micro):
    _, report, _ = micro
    again = format_report(run_experiment(ExperimentConfig.from_text(MICRO_BENCHMARK)))
    same = again.encode() == report.encode()
    assert record(12, same, f"repeat run report byte-identical: {same} ({len(report.encode())} bytes)")
