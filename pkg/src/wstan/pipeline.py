"""Training loop, evaluation and single-query inference on top of the model."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .evaluation import MetricsReport, compute_report, nms, rank_moments
from .model import WSTAN, matching_score
from .moment_map import moment_to_span, valid_mask
from .synth import Episode, make_training_pair
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_mil", "L_sd", "L_cb", "L_cbsd", "total", "y_m"]


class TrainingError(ArithmeticError):
    def __init__(self, step: int, component: str, op: str):
        super().__init__(f"non-finite value at step {step} in loss component '{component}' (op '{op}')")
        self.step = step
        self.component = component


class CompatibilityError(ValueError):
    pass


@dataclass
class StepResult:
    total: ad.Tensor
    parts: dict[str, float]
    y_m: int


def compute_losses(model: WSTAN, clips: np.ndarray, tokens: Sequence[Sequence[int]], y_m: int,
                   cfg: RunConfig, step: int = 0) -> StepResult:
    """Forward pass and the enabled objective terms for one training pair."""
    th = cfg.thresholds()
    comp = "forward"
    try:
        out = model.forward(clips, tokens)
        comp = "mil"
        P, _, _ = matching_score(out.p_m)
        parts = {"mil": L.mil_loss(P, y_m)}
        if y_m == 1:
            # pseudo-label terms are gated on matched pairs and left off the graph otherwise
            if cfg.sd_mil:
                comp = "sd"
                parts["sd"] = L.sd_loss(out.p_m, th)
            if cfg.cb:
                comp = "cb"
                parts["cb"] = L.cb_loss(out.p_m, out.p_cb, th)
                if cfg.sd_cb:
                    comp = "cb_sd"
                    parts["cb_sd"] = L.cb_sd_loss(out.p_cb, th)
        comp = "total"
        total = L.total_loss(parts, cfg.loss_weights(), y_m)
    except ad.NumericError as exc:
        raise TrainingError(step, comp, exc.op) from exc
    return StepResult(total, {k: v.item() for k, v in parts.items()}, y_m)


def build_vocab(episodes: Sequence[Episode]) -> Vocabulary:
    return Vocabulary.build(s for ep in episodes for s in ep.sentences)


def train(cfg: RunConfig, episodes: Sequence[Episode], vocab: Vocabulary | None = None,
          log_path=None, progress: Callable[[int, dict, WSTAN], None] | None = None
          ) -> tuple[WSTAN, Vocabulary, list[dict]]:
    """Train from video-level matching labels only.

    Each visit to an episode draws a fresh paragraph (own or negative, one
    sentence dropped).  Gradients are averaged over ``batch_size`` pairs
    before each Adam step.
    """
    vocab = vocab or build_vocab(episodes)
    model = WSTAN(cfg.model_config(), len(vocab), seed=cfg.model_seed)
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.train_seed)
    rows: list[dict] = []
    step = 0
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        fh.write(f"# fingerprint={cfg.fingerprint()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(episodes))
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                opt.zero_grad()
                for idx in batch:
                    ep = episodes[int(idx)]
                    pair = make_training_pair(ep, episodes, rng)
                    tokens = [tokenize(s, vocab) for s in pair.sentences]
                    res = compute_losses(model, ep.clips, tokens, pair.y_m, cfg, step)
                    try:
                        ad.backward(ad.scale(res.total, 1.0 / len(batch)))
                    except ad.NumericError as exc:
                        raise TrainingError(step, "backward", exc.op) from exc
                    row = {"step": step, "L_mil": res.parts["mil"], "L_sd": res.parts.get("sd"),
                           "L_cb": res.parts.get("cb"), "L_cbsd": res.parts.get("cb_sd"),
                           "total": res.total.item(), "y_m": pair.y_m, "epoch": epoch}
                    rows.append(row)
                    if writer:
                        writer.writerow([_cell(row[c]) for c in LOG_COLUMNS])
                    step += 1
                opt.step()
            ep_rows = rows[-len(order):]
            summary = {"epoch": epoch, "mil": float(np.mean([r["L_mil"] for r in ep_rows])),
                       "total": float(np.mean([r["total"] for r in ep_rows])),
                       "seconds": time.perf_counter() - t0}
            log.info("epoch %d  mil %.4f  total %.4f  (%.1fs)", epoch, summary["mil"],
                     summary["total"], summary["seconds"])
            if progress:
                progress(epoch, summary, model)
    finally:
        if fh:
            fh.close()
    return model, vocab, rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def epoch_means(rows: Sequence[dict], key: str = "L_mil") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in rows:
        if r.get(key) is not None:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_model(path, model: WSTAN, vocab: Vocabulary, cfg: RunConfig) -> None:
    """Checkpoint plus ``<path>.vocab``; the run config travels as meta lines."""
    meta = {"fingerprint": cfg.fingerprint(), "data_fingerprint": cfg.data_fingerprint(),
            "vocab_size": str(len(vocab))}
    meta.update({f"config.{k}": v.strip() for k, v in
                 (line.split("=", 1) for line in cfg.to_text().splitlines())})
    save_checkpoint(path, model.named_parameters(), meta)
    vocab.save(str(path) + ".vocab")


def load_model(path) -> tuple[WSTAN, Vocabulary, RunConfig]:
    tensors, meta = load_checkpoint(path)
    conf = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
    cfg = RunConfig.from_mapping(conf)
    if meta.get("fingerprint") != cfg.fingerprint():
        raise CompatibilityError("checkpoint fingerprint does not match its embedded config")
    vocab = Vocabulary.load(str(path) + ".vocab")
    if len(vocab) != int(meta.get("vocab_size", len(vocab))):
        raise CompatibilityError("vocabulary file does not match checkpoint")
    model = WSTAN(cfg.model_config(), len(vocab), seed=cfg.model_seed)
    model.load_state(tensors)
    return model, vocab, cfg


# --------------------------------------------------------------------------
# inference and evaluation
# --------------------------------------------------------------------------

def predict_maps(model: WSTAN, clips: np.ndarray, tokens: Sequence[Sequence[int]],
                 use_cb: bool) -> np.ndarray:
    """Final score maps ``[n_sentences, N, N]``; each sentence is scored on its own."""
    with ad.no_grad():
        out = model.forward(clips, tokens)
    return (out.p_cb if use_cb else out.p_m).values


@dataclass
class EvalResult:
    report: MetricsReport
    predictions: list[dict] = field(default_factory=list)


def _episode_queries(model, vocab, ep: Episode, cfg: RunConfig, use_cb: bool, keep: int):
    tokens = [tokenize(s, vocab) for s in ep.sentences]
    maps = predict_maps(model, ep.clips, tokens, use_cb)
    out = []
    for k, (m, (gi, gj)) in enumerate(zip(maps, ep.gt_spans)):
        ranked = nms(rank_moments(m, ep.duration), cfg.nms_thresh)
        gt = moment_to_span(gi, gj, ep.duration, cfg.n_clips)
        out.append((ep.id, k, ranked[:keep], gt))
    return out


def evaluate(model: WSTAN, vocab: Vocabulary, episodes: Sequence[Episode], cfg: RunConfig,
             workers: int = 1, keep: int = 10) -> EvalResult:
    """Score every (episode, sentence) query and compute R@{1,5} and mIoU.

    The complementary-branch map is used when that branch is enabled.
    ``workers`` only changes scheduling, never results.
    """
    use_cb = cfg.cb
    fn = lambda ep: _episode_queries(model, vocab, ep, cfg, use_cb, keep)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_ep = list(pool.map(fn, episodes))
    else:
        per_ep = [fn(ep) for ep in episodes]
    queries = [q for qs in per_ep for q in qs]
    samples = [(ranked, gt) for _, _, ranked, gt in queries]
    report = compute_report(samples, fingerprint=cfg.fingerprint())
    report.notes["head"] = "cb" if use_cb else "matching"
    preds = [{"episode": eid, "sentence": k, "fingerprint": cfg.fingerprint(),
              "spans": [[s, e, sc] for (s, e), sc in ranked]}
             for eid, k, ranked, _ in queries]
    return EvalResult(report, preds)


def random_baseline(episodes: Sequence[Episode], cfg: RunConfig, seeds: Sequence[int] = range(10)
                    ) -> MetricsReport:
    """Uniform random score maps through the same NMS and metric path, seed-averaged."""
    n = cfg.n_clips
    mask = valid_mask(n)
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        samples = []
        for ep in episodes:
            for gi, gj in ep.gt_spans:
                m = np.where(mask, rng.random((n, n)), 0.0)
                ranked = nms(rank_moments(m, ep.duration), cfg.nms_thresh)
                samples.append((ranked[:10], moment_to_span(gi, gj, ep.duration, n)))
        reports.append(compute_report(samples))
    avg = MetricsReport(count=reports[0].count, fingerprint="random")
    for key in reports[0].values:
        avg.values[key] = float(np.mean([r.values[key] for r in reports]))
    avg.miou = float(np.mean([r.miou for r in reports]))
    avg.notes["seeds"] = list(seeds)
    return avg


def write_predictions(path, preds: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")


def infer(model: WSTAN, vocab: Vocabulary, cfg: RunConfig, clips: np.ndarray, duration: float,
          sentence: str) -> tuple[tuple[float, float], float, np.ndarray]:
    """Top span in seconds, its score and the full score map for one query."""
    tokens = [tokenize(sentence, vocab)]
    m = predict_maps(model, clips, tokens, cfg.cb)[0]
    (span, score), = rank_moments(m, duration)[:1]
    return span, score, m


def write_pgm(path, score_map: np.ndarray, fingerprint: str | None = None) -> None:
    """Plain-text (P2) grayscale image; 255 is score 1, lower triangle is 0."""
    m = np.asarray(score_map)
    n = m.shape[0]
    px = np.where(valid_mask(n), np.clip(np.rint(m * 255.0), 0, 255), 0).astype(int)
    lines = ["P2"]
    if fingerprint:
        lines.append(f"# fingerprint={fingerprint}")
    lines += [f"{n} {n}", "255"] + [" ".join(map(str, row)) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")
