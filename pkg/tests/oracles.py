"""Independent reference computations used by the unit and acceptance tests."""
import numpy as np


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x for a scalar function ``f`` of the array ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-5, np.abs(a) + np.abs(b))))


def check(build, inputs, eps: float = 1e-6) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``build(*tensors)`` must return a scalar Tensor; ``inputs`` are float64
    arrays turned into leaf tensors.
    """
    from dae_seq2seq import autodiff as ad

    with ad.precision(np.float64):
        leaves = [ad.parameter(np.array(x, dtype=np.float64)) for x in inputs]
        ad.backward(build(*leaves))
        worst = 0.0
        for t in leaves:
            num = numeric_grad(lambda: float(build(*leaves).data), t.data, eps)
            worst = max(worst, rel_error(t.grad, num))
    return worst


def model_loss_error(model, batch_fn, names=None, eps: float = 1e-6, max_entries: int = 6, seed: int = 0):
    """Spot-check ``max_entries`` entries of every parameter of ``model``."""
    from dae_seq2seq import autodiff as ad

    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.grad = None
    ad.backward(batch_fn())
    worst = 0.0
    for name, p in model.params.items():
        if names is not None and name not in names:
            continue
        flat = p.data.reshape(-1)
        for j in rng.choice(flat.size, min(max_entries, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + eps
            hi = float(batch_fn().data)
            flat[j] = old - eps
            lo = float(batch_fn().data)
            flat[j] = old
            num = (hi - lo) / (2 * eps)
            ana = p.grad.reshape(-1)[j]
            worst = max(worst, abs(ana - num) / max(1e-5, abs(ana) + abs(num)))
    return worst


def primitive_cases():
    """(name, build, inputs) for every differentiable primitive."""
    from dae_seq2seq import autodiff as ad

    r = np.random.default_rng(0)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    row = r.normal(size=(4,))
    w = r.normal(size=(4, 5))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    awayzero = a + np.sign(a) * 0.1
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    def sq(t):
        return ad.reduce_sum(ad.mul(t, t))

    def wsum(t):
        """Random linear functional, so every output entry gets a distinct weight."""
        c = np.random.default_rng(t.data.size).normal(size=t.shape)
        return ad.reduce_sum(ad.mul(t, ad.as_tensor(c)))

    return [
        ("add", lambda x, y: sq(ad.add(x, y)), [a, b]),
        ("add_broadcast", lambda x, y: sq(ad.add(x, y)), [a, row]),
        ("sub", lambda x, y: sq(ad.sub(x, y)), [a, row]),
        ("mul", lambda x, y: sq(ad.mul(x, y)), [a, row]),
        ("scale", lambda x: sq(ad.scale(x, -1.7)), [a]),
        ("add_scalar", lambda x: sq(ad.add_scalar(x, 0.3)), [a]),
        ("matmul", lambda x, y: sq(ad.matmul(x, y)), [a, w]),
        ("matmul_batched", lambda x, y: sq(ad.matmul(x, y)),
         [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
        ("matmul_broadcast", lambda x, y: sq(ad.matmul(x, y)), [r.normal(size=(2, 3, 4)), w]),
        ("exp", lambda x: wsum(ad.exp(x)), [a]),
        ("log", lambda x: wsum(ad.log(x)), [pos]),
        ("tanh", lambda x: wsum(ad.tanh(x)), [a]),
        ("sigmoid", lambda x: wsum(ad.sigmoid(x)), [a]),
        ("relu", lambda x: wsum(ad.relu(x)), [awayzero]),
        ("softmax", lambda x: wsum(ad.softmax(x, axis=-1)), [a]),
        ("softmax_axis0", lambda x: wsum(ad.softmax(x, axis=0)), [a]),
        ("log_softmax", lambda x: wsum(ad.log_softmax(x, axis=-1)), [a]),
        ("layer_norm", lambda x, g, c: wsum(ad.layer_norm(x, g, c)), [a, row + 1.0, row]),
        ("embedding", lambda t: wsum(ad.embedding(t, ids)), [r.normal(size=(4, 2))]),
        ("index_add", lambda x: wsum(ad.index_add(x, [[0, 2, 2, 1]], 4)), [a]),
        ("take", lambda x: sq(ad.take(x, [0, 3, 3])), [a]),
        ("concat", lambda x, y: wsum(ad.reshape(ad.concat([x, y], axis=0), (3, 4, 2))), [a, b]),
        ("reshape", lambda x: wsum(ad.reshape(ad.reshape(x, (4, 3)), (3, 4))), [a]),
        ("transpose", lambda x: wsum(ad.transpose(ad.transpose(x, (1, 0)), (1, 0))), [a]),
        ("masked_fill", lambda x: wsum(ad.masked_fill(x, a > 0, 0.5)), [b]),
        ("dropout", lambda x: wsum(ad.dropout(x, 0.4, np.random.default_rng(7), True)), [a]),
        ("reduce_sum_axis", lambda x: sq(ad.reduce_sum(x, axis=1)), [a]),
        ("reduce_sum_keepdims", lambda x: sq(ad.reduce_sum(x, axis=0, keepdims=True)), [a]),
        ("reduce_mean", lambda x: sq(ad.reduce_mean(x, axis=-1)), [a]),
        ("operators", lambda x, y: sq((x - y) * x / 2.0 + (-y)), [a, b]),
    ]


def tiny_model_loss_error(seed: int = 0, max_entries: int = 10, dropout: float = 0.1) -> float:
    """Gradient check of the full masked pointer-generator loss on a tiny model."""
    from dae_seq2seq import autodiff as ad
    from dae_seq2seq.corpus import Vocabulary
    from dae_seq2seq.model import ModelConfig, Seq2Seq
    from dae_seq2seq.training import batch_loss, collate, make_example

    vocab = Vocabulary([f"w{i}" for i in range(7)], [1] * 7)
    pairs = [("w0 w1 Q w2".split(), "w1 Q w3".split(), [1, 0, 1]),
             ("w4 R".split(), "R w5 w6 w0".split(), [0, 1, 1, 0])]
    with ad.precision(np.float64):
        cfg = ModelConfig(vocab_size=len(vocab), n_layers_enc=1, n_layers_dec=1, d_model=8,
                          n_heads=2, d_ffn=16, dropout=dropout, max_positions=16)
        model = Seq2Seq(cfg, seed=seed)
        batch = collate([make_example(s, t, vocab, m) for s, t, m in pairs], len(vocab))

        def loss():
            rng = np.random.default_rng(seed)
            return batch_loss(model, batch, train=dropout > 0, rng=rng)

        return model_loss_error(model, loss, eps=1e-5, max_entries=max_entries, seed=seed)


def brute_force_decode(model, src_ext, n_ext: int, max_len: int, alpha: float = 1.0):
    """Best EOS-terminated sequence by exhaustive enumeration.

    Scores use the teacher-forced forward pass, a different code path from
    the incremental scorer the beam search uses.  Returns (ids, score).
    """
    import itertools

    from dae_seq2seq.corpus import EOS

    body = [t for t in range(n_ext) if t != EOS]
    best, best_score = None, -np.inf
    for k in range(max_len):
        for prefix in itertools.product(body, repeat=k):
            target = list(prefix) + [EOS]
            lp = model.forward_logprobs(src_ext, target, n_ext)
            total = float(lp[np.arange(len(target)), target].sum())
            score = total / len(target) ** alpha
            if score > best_score:
                best, best_score = list(prefix), score
    return best, best_score


# Hand-counted ROUGE fixtures:
# (candidate, reference, unigram (overlap, n_cand, n_ref), bigram (...), LCS length)
ROUGE_FIXTURES = [
    ("the cat sat", "the cat", (2, 3, 2), (1, 2, 1), 2),
    ("a c b", "a b c", (3, 3, 3), (0, 2, 2), 2),
    ("x y z", "x y z", (3, 3, 3), (2, 2, 2), 3),
    ("a b", "c d", (0, 2, 2), (0, 1, 1), 0),
    ("", "a b", (0, 0, 2), (0, 0, 1), 0),
    ("a", "a", (1, 1, 1), (0, 0, 0), 1),
    ("the the the the", "the cat the", (2, 4, 3), (0, 3, 2), 2),
    ("a b a b", "b a b a", (4, 4, 4), (2, 3, 3), 3),
    ("police killed the gunman", "police kill the gunman", (3, 4, 4), (1, 3, 3), 3),
    ("the gunman kill police", "police kill the gunman", (4, 4, 4), (1, 3, 3), 2),
    ("a b c d e", "a x c y e", (3, 5, 5), (0, 4, 4), 3),
    ("A a", "a a", (1, 2, 2), (0, 1, 1), 1),
    ("x", "", (0, 1, 0), (0, 0, 0), 0),
    ("a b c", "c b a", (3, 3, 3), (0, 2, 2), 1),
    ("one two three four", "one two", (2, 4, 2), (1, 3, 1), 2),
    ("k k k", "k", (1, 3, 1), (0, 2, 0), 1),
    ("a b c a b c", "a b c", (3, 6, 3), (2, 5, 2), 3),
    ("a b x c d", "a b c d", (4, 5, 4), (2, 4, 3), 4),
    ("d c b a", "a b c d e", (4, 4, 5), (0, 3, 4), 1),
    ("the quick brown fox jumps", "the fast brown fox leaps", (3, 5, 5), (1, 4, 4), 3),
]


def expected_rouge(overlap: int, n_cand: int, n_ref: int):
    """(P, R, F1) as exact fractions, zero where a denominator is zero."""
    from fractions import Fraction

    p = Fraction(overlap, n_cand) if n_cand else Fraction(0)
    r = Fraction(overlap, n_ref) if n_ref else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f


def rouge_matches(score, overlap, n_cand, n_ref) -> bool:
    p, r, f = expected_rouge(overlap, n_cand, n_ref)
    return (score.precision == float(p) and score.recall == float(r)
            and abs(score.f1 - float(f)) <= 1e-15
            and score.scaled() == tuple(round(100 * float(v), 2) for v in (p, r, f)))


class UniformModel:
    """Assigns probability 1/V to every label."""

    def __init__(self, vocab_size: int):
        from types import SimpleNamespace

        self.cfg = SimpleNamespace(vocab_size=vocab_size)

    def label_logprobs(self, src, tgt_in, labels, n_ext, src_pad=None, train=False, rng=None):
        from dae_seq2seq import autodiff as ad

        return ad.Tensor(np.full(np.shape(labels), -np.log(self.cfg.vocab_size)), dtype=np.float64)


def uniform_seq2seq(vocab_size: int):
    """A real network whose output is uniform over the fixed vocabulary.

    Zero embeddings give equal logits; a saturated gate gives p_gen == 1 in
    float64, so no copy mass is added.
    """
    from dae_seq2seq import autodiff as ad
    from dae_seq2seq.model import ModelConfig, Seq2Seq

    with ad.precision(np.float64):
        m = Seq2Seq(ModelConfig(vocab_size=vocab_size, n_layers_enc=1, n_layers_dec=1, d_model=8,
                                n_heads=2, d_ffn=16, dropout=0.0, max_positions=32))
    m.params["embed"].data[...] = 0.0
    m.params["gen.w"].data[...] = 0.0
    m.params["gen.b"].data[...] = 40.0
    return m
