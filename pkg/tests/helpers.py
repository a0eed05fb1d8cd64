"""Small shared builders for the test suite."""

import numpy as np

from sspo.model import ModelConfig, PolicyParams, SeqBatch, batch_logprobs
from sspo.synth import TaskSpec, generate_dataset, vocabulary_texts
from sspo.tokenizer import Tokenizer
from sspo.train import Example, SampledGroup

SMALL = ModelConfig(vocab_size=20, channels=2, patch_len=8, enc_layers=1, enc_dim=8, dec_layers=1, dec_dim=8,
                    heads=2, max_seq=24, seed=1)


def random_params(seed, cfg=SMALL, scale=0.3):
    p = PolicyParams.init(cfg)
    rng = np.random.default_rng(seed)
    return PolicyParams(cfg, p.flatten() + scale * rng.normal(size=len(p)))


def random_examples(seed, n, cfg=SMALL, t=32):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = tuple(rng.integers(3, cfg.vocab_size, size=rng.integers(1, 4)).tolist())
        y = tuple(rng.integers(0, cfg.vocab_size, size=rng.integers(1, 7)).tolist())
        out.append(Example(rng.normal(size=(t, cfg.channels)), q, y))
    return out


def random_group(seed, params, g=4, jitter=0.3):
    """A group whose old log-probs sit near the current ones, so ratios straddle the clip range."""
    rng = np.random.default_rng(seed)
    ex = random_examples(seed, 1, params.cfg)[0]
    seqs = [rng.integers(0, params.cfg.vocab_size, size=rng.integers(2, 7)).tolist() for _ in range(g)]
    sb = SeqBatch.make([ex.signal] * g, [ex.query_ids] * g, seqs)
    lp, _ = batch_logprobs(params, sb)
    old = [lp[i, sb.target_mask[i]] + jitter * rng.normal(size=len(s)) / len(s) for i, s in enumerate(seqs)]
    return SampledGroup(ex.signal, ex.query_ids, seqs, old)


def tiny_task(n_train=48, n_val=16, n_test=16, seed=0):
    spec = TaskSpec(n_train=n_train, n_val=n_val, n_test=n_test, seed=seed)
    return spec, generate_dataset(spec), Tokenizer.from_texts(vocabulary_texts(spec))
