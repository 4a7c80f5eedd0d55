"""Central finite differences against the analytic gradient of the full training loss."""

import numpy as np

from pmdkg.distill import DistillWeights
from pmdkg.encoder import TOWERS, EncoderConfig, as_leaves, init_bi_encoder
from pmdkg.pipeline import StageSpec, TrainOptions, compute_losses
from pmdkg.text import CLS_ID, PAD_ID, SEP_ID, SequenceBatch, apply_mask


def random_batch(rng, b, t, vocab):
    ids = rng.integers(5, vocab, size=(b, t))
    lengths = rng.integers(4, t + 1, size=b)
    att = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int8)
    ids[:, 0] = CLS_ID
    ids[np.arange(b), lengths - 1] = SEP_ID
    ids[att == 0] = PAD_ID
    maskable = (att.astype(bool) & (ids != CLS_ID) & (ids != SEP_ID)).astype(np.int8)
    return SequenceBatch(ids, att, maskable)


def full_loss_gradcheck(n_coords=120, seed=0, step=1e-4):
    """Return (relative errors, analytic, numeric) over randomly drawn coordinates."""
    rng = np.random.default_rng(seed)
    config = EncoderConfig(layers=2, hidden=16, heads=2, ff=32, vocab_size=30, max_len=10, dropout=0.0)
    student = init_bi_encoder(config, seed + 1, dtype=np.float64)
    teacher = init_bi_encoder(config, seed + 2, dtype=np.float64)
    # larger weights than the training init so that every term has a visible gradient
    for params in (student.hr, student.tail, teacher.hr, teacher.tail):
        for name, value in params.tensors.items():
            if not name.endswith(("gain", "shift", "bias")):
                value *= 10.0
    hr, tail = random_batch(rng, 4, 10, 30), random_batch(rng, 4, 10, 30)
    masked = apply_mask(hr, tail, 0.4, rng)
    assert masked.num_masked > 0
    labels = np.arange(4)
    spec = StageSpec(grade=2, mask_rate=0.4, weights=DistillWeights(0.2, 0.3), epochs=1, lr=1e-3,
                     batch_size=4, init="copy", strategy="pmd")
    opts = TrainOptions()

    def loss(leaves):
        return compute_losses(leaves, config, teacher, masked, labels, spec, opts, None)

    leaves = {tower: as_leaves(student.tower(tower), requires_grad=True) for tower in TOWERS}
    out = loss(leaves)
    assert out["feature_active"] and float(out["score"].data) > 0
    out["total"].backward()

    names = [(tower, name) for tower in TOWERS for name in sorted(student.tower(tower).tensors)]
    analytic, numeric = [], []
    for _ in range(n_coords):
        tower, name = names[rng.integers(len(names))]
        value = student.tower(tower).tensors[name]
        idx = tuple(int(rng.integers(s)) for s in value.shape)
        g = leaves[tower][name].grad
        analytic.append(0.0 if g is None else float(g[idx]))
        orig = value[idx]
        vals = []
        for delta in (step, -step):
            value[idx] = orig + delta
            probe = {tw: as_leaves(student.tower(tw)) for tw in TOWERS}
            vals.append(float(loss(probe)["total"].data))
        value[idx] = orig
        numeric.append((vals[0] - vals[1]) / (2 * step))
    analytic, numeric = np.array(analytic), np.array(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
    return np.abs(analytic - numeric) / denom, analytic, numeric
