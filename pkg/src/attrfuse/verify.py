"""Gradient verification of the assembled model."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .config import TrainConfig
from .data import FixtureConfig, SampleRecord, load_manifest, synthetic_samples
from .model import OAMVQA, collate
from .primitives import GradCheckReport, grad_check


def gradcheck_fixture(cfg: TrainConfig, n_samples: int = 2, seed: int = 0):
    """Small synthetic batch sized to ``cfg``'s input widths."""
    fx = FixtureConfig(n_samples=n_samples, M=3, L=4, d_v=cfg.d_v, d_e=cfg.d_e, d_t=cfg.d_t,
                       n_t=3, n_p=2, n_c=2, vocab_size=4, attribute_words=0, seed=seed)
    return synthetic_samples(fx)


def full_pipeline_grad_check(cfg: TrainConfig, samples: Sequence[SampleRecord] | None = None,
                             n_answers: int | None = None) -> GradCheckReport:
    """Check d(total loss)/d(every parameter) on a 2-sample batch in float64.

    Uses the first two samples of ``cfg.train_manifest`` when one is set,
    otherwise a generated fixture.
    """
    cfg = replace(cfg, precision="f64").validate()
    if samples is None:
        if cfg.train_manifest:
            manifest = load_manifest(cfg.train_manifest)
            samples = [manifest.sample(i) for i in range(min(2, manifest.N))]
            n_answers = len(manifest.vocabulary)
        else:
            samples, vocab = gradcheck_fixture(cfg)
            n_answers = len(vocab)
    n_answers = n_answers or len(samples[0].answer_targets)
    model = OAMVQA(cfg, n_answers)
    groups = collate(samples, cfg.knowledge_streams, model.dtype)

    def loss():
        out, targets = model.run(groups)
        return model.losses(out, targets).total

    return grad_check(loss, model, eps=cfg.grad_eps, tol=cfg.grad_tol)
