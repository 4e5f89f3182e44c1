"""End-to-end acceptance checks for the whole toolkit.

One test per guarantee, each printing a single pass/fail line under
``pytest -v``: parameter accounting, gradient correctness, the brute-force
convolution oracle, the variant construction matrix, the quantization
codebook invariants, desk-scale learning, half-quantized accuracy
retention, and checkpoint persistence.
"""

import numpy as np
import pytest

from mdunet import ops
from mdunet.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_into_graph,
    save_graph,
)
from mdunet.data import SyntheticSpec, synth_dataset
from mdunet.gradcheck import grad_check
from mdunet.graph import (
    ArchConfig,
    build_mdunet,
    build_unet,
    param_count,
    run_backward,
    run_forward,
    shape_infer,
)
from mdunet.quantize import (
    QuantConfig,
    apply_quant_step,
    codebook,
    compute_bounds,
    quantize_value,
    run_inq_schedule,
    QuantState,
)
from mdunet.training import TrainConfig, evaluate, train_loop

from oracles import conv2d_naive

SEEDS = range(5)

# Exact counts at depth 5, base 32, fixed as regression values after the
# symbolic-sum oracle confirmed them.
BASELINE_PARAMS = 7_765_442
BASELINE_PARAMS_BASE64 = 31_042_434
FAMILY_INCREMENTS = {
    "enc_dense=4": 7_816,
    "cross_mode=cross5": 18_432,
    "dec_dense=4": 6_224,
}
FULL_INCREMENT = 31_720  # encoder_4 + cross5 + decoder_4 combined

# Every named variant: multi-input, multi-output, encoder and decoder dense
# degrees 1-4, the four cross modes, and the four composites.
VARIANT_MATRIX = [
    dict(enc_dense="min"),
    dict(dec_dense="mout"),
    dict(enc_dense=1),
    dict(enc_dense=2),
    dict(enc_dense=3),
    dict(enc_dense=4),
    dict(dec_dense=1),
    dict(dec_dense=2),
    dict(dec_dense=3),
    dict(dec_dense=4),
    dict(cross_mode="upper"),
    dict(cross_mode="lower"),
    dict(cross_mode="cross3"),
    dict(cross_mode="cross5"),
    dict(enc_dense=4, cross_mode="cross5"),
    dict(enc_dense=4, dec_dense=4),
    dict(cross_mode="cross5", dec_dense=4),
    dict(enc_dense=4, cross_mode="cross5", dec_dense=4),
]


def test_parameter_accounting():
    total = {}
    for kwargs in [{}] + VARIANT_MATRIX:
        graph = build_mdunet(ArchConfig(depth=5, base_channels=32, **kwargs))
        key = ",".join(f"{k}={v}" for k, v in kwargs.items()) or "baseline"
        total[key] = param_count(graph)["total"]

    base = total["baseline"]
    assert base == BASELINE_PARAMS
    assert 7_000_000 <= base <= 8_500_000
    wide = build_mdunet(ArchConfig(depth=5, base_channels=64))
    assert param_count(wide)["total"] == BASELINE_PARAMS_BASE64

    increments = {k: total[k] - base for k, v in FAMILY_INCREMENTS.items()}
    assert increments == FAMILY_INCREMENTS
    for name, inc in increments.items():
        assert inc < 0.01 * base, name

    full = total["enc_dense=4,cross_mode=cross5,dec_dense=4"] - base
    assert full == FULL_INCREMENT
    assert full < 3 * max(increments.values())


def test_gradient_correctness():
    worst = {}

    for seed in SEEDS:
        rng = np.random.default_rng(seed)

        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3) * 0.1

        def conv(x, w, b):
            y, ctx = ops.conv2d_forward(x, w, b, 1, 1)
            return y, lambda g: ops.conv2d_backward(ctx, g)

        worst["conv2d"] = max(worst.get("conv2d", 0),
                              grad_check(conv, [x, w, b], seed=seed))

        x1 = rng.standard_normal((2, 3, 4, 4))
        w1 = rng.standard_normal((2, 3, 1, 1)) * 0.5

        def conv1x1(x, w):
            y, ctx = ops.conv2d_forward(x, w, None, 1, 0)
            return y, lambda g: ops.conv2d_backward(ctx, g)[:2]

        worst["conv1x1"] = max(worst.get("conv1x1", 0),
                               grad_check(conv1x1, [x1, w1], seed=seed))

        a = rng.standard_normal((1, 2, 3, 3))
        c = rng.standard_normal((1, 3, 3, 3))

        def concat(a, c):
            y, ch = ops.concat_channels_forward([a, c])
            return y, lambda g: tuple(ops.concat_channels_backward(ch, g))

        worst["concat"] = max(worst.get("concat", 0),
                              grad_check(concat, [a, c], seed=seed))

        # distinct integers keep pooling windows far from ties
        xp = rng.permutation(np.arange(64, dtype=np.float64)).reshape(1, 1, 8, 8)

        def pool(x):
            y, ctx = ops.maxpool2_forward(x, times=2)
            return y, lambda g: (ops.maxpool2_backward(ctx, g),)

        worst["maxpool"] = max(worst.get("maxpool", 0),
                               grad_check(pool, [xp], seed=seed))

        xu = rng.standard_normal((2, 2, 3, 3))

        def up(x):
            y, ctx = ops.nearest_up2_forward(x)
            return y, lambda g: (ops.nearest_up2_backward(ctx, g),)

        worst["nearest_up"] = max(worst.get("nearest_up", 0),
                                  grad_check(up, [xu], seed=seed))

        xt = rng.standard_normal((1, 3, 3, 3))
        wt = rng.standard_normal((3, 2, 2, 2)) * 0.5
        bt = rng.standard_normal(2) * 0.1

        def tconv(x, w, b):
            y, ctx = ops.transposed_conv2_forward(x, w, b)
            return y, lambda g: ops.transposed_conv2_backward(ctx, g)

        worst["tconv"] = max(worst.get("tconv", 0),
                             grad_check(tconv, [xt, wt, bt], seed=seed))

        logits = rng.standard_normal((1, 2, 2, 2))
        labels = rng.integers(0, 2, (1, 2, 2))

        def ce(lg):
            loss, grad = ops.softmax_cross_entropy(lg, labels)
            return np.array([loss]), lambda g: (grad * g[0],)

        worst["softmax_ce"] = max(worst.get("softmax_ce", 0),
                                  grad_check(ce, [logits], seed=seed))

        xb = rng.standard_normal((1, 2, 3, 3))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2) * 0.1
        rm, rv = np.zeros(2), np.ones(2)

        def bn(x, gamma, beta):
            y, ctx, _, _ = ops.batch_norm_forward(x, gamma, beta, rm, rv,
                                                  train=True)
            return y, lambda g: ops.batch_norm_backward(ctx, g)

        worst["batch_norm"] = max(worst.get("batch_norm", 0),
                                  grad_check(bn, [xb, gamma, beta], seed=seed))

    for op in ("conv2d", "conv1x1", "concat", "maxpool", "nearest_up",
               "tconv", "softmax_ce"):
        assert worst[op] < 1e-3, f"{op}: {worst[op]:.2e}"
    assert worst["batch_norm"] < 1e-2, f"batch_norm: {worst['batch_norm']:.2e}"

    # whole model: every parameter of a depth-2 base-2 net on an 8x8 input
    seed = 18
    graph = build_unet(ArchConfig(depth=2, base_channels=2), seed=seed)
    x = np.random.default_rng(seed).standard_normal((1, 1, 8, 8))
    names = sorted(graph.parameters)
    arrays = [graph.parameters[n].values.astype(np.float64) for n in names]
    buf64 = {k: v.astype(np.float64) for k, v in graph.buffers.items()}

    def model(*arrs):
        tape = []
        out = run_forward(graph, x, "train", params=dict(zip(names, arrs)),
                          buffers=dict(buf64), tape=tape)

        def backward(gy):
            pgrads = run_backward(graph, tape, gy)
            return [pgrads[n] for n in names]

        return out, backward

    err = grad_check(model, arrays, seed=seed)
    assert err < 1e-2, f"end-to-end: {err:.2e}"


def test_conv_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        h = int(rng.integers(4, 9))
        w_ext = int(rng.integers(4, 9))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1]))
        # windows must tile the padded extent exactly
        h -= (h + 2 * padding - k) % stride
        w_ext -= (w_ext + 2 * padding - k) % stride
        x = rng.standard_normal((n, cin, h, w_ext)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        got, _ = ops.conv2d_forward(x, w, b, stride, padding)
        want = conv2d_naive(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_variant_construction_matrix():
    for kwargs in [{}] + VARIANT_MATRIX:
        graph = build_mdunet(ArchConfig(depth=5, base_channels=32, **kwargs))
        shapes = shape_infer(graph, (1, 1, 64, 64))
        assert shapes[graph.output_id] == (1, 2, 64, 64), kwargs
    # the densest composite also runs end to end
    graph = build_mdunet(ArchConfig(depth=5, base_channels=32, enc_dense=4,
                                    cross_mode="cross5", dec_dense=4), seed=0)
    x = np.random.default_rng(0).standard_normal((1, 1, 64, 64)).astype(np.float32)
    assert run_forward(graph, x, "infer").shape == (1, 2, 64, 64)


def test_quantization_codebook_suite():
    # value-level properties over 1e5 random reals per bit width
    for bits in (3, 5, 7):
        rng = np.random.default_rng(bits)
        values = rng.uniform(-2.0, 2.0, 100_000)
        bounds = compute_bounds(values, bits)
        zero_floor = 3.0 * 2.0 ** (bounds.n2 - 2)
        q = np.array([quantize_value(float(v), bounds) for v in values])

        nonzero = q != 0
        logs = np.log2(np.abs(q[nonzero]))
        assert np.all(logs == np.round(logs))
        assert np.all((logs >= bounds.n2) & (logs <= bounds.n1))
        np.testing.assert_array_equal(~nonzero, np.abs(values) < zero_floor)

        # idempotent, and nearest codeword in magnitude for nonzero results
        # (band edges are midpoints, so exact ties may round either way)
        qq = np.array([quantize_value(float(v), bounds) for v in q[:1000]])
        np.testing.assert_array_equal(qq, q[:1000])
        cb = codebook(bounds)
        dist = np.abs(q[nonzero][:1000] - values[nonzero][:1000])
        best = np.min(np.abs(cb[None, :] - values[nonzero][:1000, None]), axis=1)
        np.testing.assert_allclose(dist, best, atol=1e-12)

    # model-level: every frozen weight lands on the codebook after a step,
    # and stays bit-identical through 100 further optimizer steps
    images, masks = synth_dataset(SyntheticSpec(count=4, size=16, seed=2))
    graph = build_unet(ArchConfig(depth=2, base_channels=2), seed=0)
    train_loop(graph, images, masks, TrainConfig(iterations=20, seed=0))
    state = apply_quant_step(graph.parameters, QuantState(bits=5), 0.5)
    for name, p in graph.parameters.items():
        frozen = p.values[p.frozen_mask]
        if state.bounds[name] is None:
            np.testing.assert_array_equal(frozen, 0.0)
            continue
        logs = np.log2(np.abs(frozen[frozen != 0]))
        assert np.all(logs == np.round(logs)), name
        assert np.all((logs >= state.bounds[name].n2)
                      & (logs <= state.bounds[name].n1)), name

    before = {name: p.values[p.frozen_mask].copy()
              for name, p in graph.parameters.items()}
    train_loop(graph, images, masks, TrainConfig(iterations=100, seed=3))
    for name, p in graph.parameters.items():
        np.testing.assert_array_equal(p.values[p.frozen_mask], before[name])


@pytest.fixture(scope="module")
def blob_task():
    """100 training and 20 held-out 64x64 blob images, plus a baseline
    U-Net and a dense variant each trained 500 iterations at lr 0.005."""
    train_images, train_masks = synth_dataset(
        SyntheticSpec(count=100, size=64, seed=7))
    test_images, test_masks = synth_dataset(
        SyntheticSpec(count=20, size=64, seed=8))
    cfg = TrainConfig(base_lr=0.005, batch_size=4, iterations=500, seed=0)

    baseline = build_mdunet(ArchConfig(depth=3, base_channels=8), seed=0)
    train_loop(baseline, train_images, train_masks, cfg)
    baseline_dice = evaluate(baseline, test_images, test_masks).dice

    dense = build_mdunet(
        ArchConfig(depth=3, base_channels=8, enc_dense=2,
                   cross_mode="cross3", dec_dense=2), seed=0)
    train_loop(dense, train_images, train_masks, cfg)
    dense_dice = evaluate(dense, test_images, test_masks).dice

    return dict(train=(train_images, train_masks),
                test=(test_images, test_masks),
                dense=dense, baseline_dice=baseline_dice,
                dense_dice=dense_dice)


def test_desk_scale_learning(blob_task):
    assert blob_task["dense_dice"] >= 0.90
    assert blob_task["dense_dice"] >= blob_task["baseline_dice"] - 0.02


def test_half_quantized_retention(blob_task):
    images, masks = blob_task["train"]
    graph = blob_task["dense"]
    reference_dice = blob_task["dense_dice"]

    def retrain(step_index, fraction):
        train_loop(graph, images, masks,
                   TrainConfig(base_lr=0.005, batch_size=4, iterations=150,
                               seed=1 + step_index))

    run_inq_schedule(graph.parameters,
                     QuantConfig(bits=5, schedule=(0.5,)), retrain)
    test_images, test_masks = blob_task["test"]
    half_dice = evaluate(graph, test_images, test_masks).dice
    assert abs(half_dice - reference_dice) <= 0.03


def test_checkpoint_persistence(tmp_path):
    images, masks = synth_dataset(SyntheticSpec(count=4, size=16, seed=2))
    cfg = ArchConfig(depth=2, base_channels=4)
    graph = build_unet(cfg, seed=0)
    train_loop(graph, images, masks, TrainConfig(iterations=10, seed=0))
    graph.parameters["enc1_conv1.weight"].frozen_mask[0] = True
    metrics = evaluate(graph, images, masks)

    path = str(tmp_path / "model.ckpt")
    save_graph(path, graph)
    restored = build_unet(cfg, seed=123)
    load_into_graph(path, restored)

    for name, p in graph.parameters.items():
        np.testing.assert_array_equal(restored.parameters[name].values, p.values)
        np.testing.assert_array_equal(restored.parameters[name].frozen_mask,
                                      p.frozen_mask)
    for name, buf in graph.buffers.items():
        np.testing.assert_array_equal(restored.buffers[name], buf)

    again = evaluate(restored, images, masks)
    assert again.mean_iou == metrics.mean_iou
    assert again.dice == metrics.dice

    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 3] ^= 0x40
    with pytest.raises(CheckpointError, match="CRC"):
        decode_checkpoint(bytes(blob))
    # sanity: an untouched blob still decodes
    decode_checkpoint(encode_checkpoint(
        {"w": np.ones(3, dtype=np.float32)}))
