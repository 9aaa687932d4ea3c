"""Corpus-level metrics for a trained pipeline.

Everything is teacher-forced or ground-truth-conditioned: the point is
to measure each stage against the corpus it was fitted to, not to score
free-running synthesis quality (which has no reference here).
"""

from __future__ import annotations

import json

import numpy as np

from ..flow import SolverConfig, sample_mel
from .data import CorpusItem, reference_pairing, text_ids_for
from .infer import LoadedPipeline
from .train import ar_accuracy, token_grids, tokenizer_metrics


def evaluate(pipe: LoadedPipeline, items: list[CorpusItem], mel_items: int = 8) -> dict:
    """Metrics report as a JSON-able dict.

    `mel_items` caps how many utterances get a full flow-sampled mel
    comparison, the one genuinely slow metric.
    """
    tok = pipe.tokenizer
    report: dict = {"n_items": len(items)}
    report["tokenizer"] = tokenizer_metrics(tok, items)

    grids = token_grids(tok, items)
    refs = reference_pairing(items)
    layers = pipe.ar.cfg.layers_per_stream
    rows = [(text_ids_for(it.bundle),
             grids[refs[i]][:, :, :layers],
             grids[i][:, :, :layers])
            for i, it in enumerate(items)]
    report["ar"] = {"teacher_forced_accuracy": ar_accuracy(pipe.ar, rows)}

    if pipe.nar is not None:
        pairs = [(grids[refs[i]], grids[i]) for i in range(len(items))]
        acc = pipe.nar.stage_accuracy(pairs)
        exact = {}
        for stage in pipe.nar.stages:
            total = hits = 0
            for ref_g, tgt_g in pairs:
                pred = stage.predict(ref_g, tgt_g)
                want = tgt_g[:, :, stage.layer_index]
                hits += int(np.all(pred == want, axis=1).sum())
                total += pred.shape[0]
            exact[f"layer{stage.layer_index + 1}"] = hits / total
        report["nar"] = {"stage_accuracy": acc, "frame_exact_match": exact}

    mse = []
    for it in items[:mel_items]:
        features = tok.decode_tokens(tok.encode_streams(it.bundle))
        cond = tok.speaker_condition(it.bundle.speaker_frames)
        mel = sample_mel(pipe.flow, features, cond,
                         SolverConfig(n_steps=pipe.config.flow.default_steps, seed=0))
        mse.append(float(((mel - it.bundle.mel) ** 2).mean()))
    report["flow"] = {"mel_mse_mean": float(np.mean(mse)), "mel_mse_per_item": mse}
    return report


def format_report(report: dict) -> str:
    """Human-readable rendering of an `evaluate` report."""
    lines = [f"items evaluated: {report['n_items']}"]
    tk = report["tokenizer"]
    for name in sorted(tk["recon_mse"]):
        util = ", ".join(f"{u:.2f}" for u in tk["utilization"][name])
        perp = ", ".join(f"{p:.1f}" for p in tk["perplexity"][name])
        lines.append(f"tokenizer[{name}]: recon MSE {tk['recon_mse'][name]:.6f}; "
                     f"utilization [{util}]; perplexity [{perp}]")
    for name, acc in sorted(report["ar"]["teacher_forced_accuracy"].items()):
        lines.append(f"ar[{name}]: teacher-forced accuracy {acc:.4f}")
    if "nar" in report:
        for layer, acc in sorted(report["nar"]["stage_accuracy"].items()):
            exact = report["nar"]["frame_exact_match"][layer]
            lines.append(f"nar[{layer}]: token accuracy {acc:.4f}; frame exact match {exact:.4f}")
    lines.append(f"flow: mel MSE {report['flow']['mel_mse_mean']:.6f} "
                 f"over {len(report['flow']['mel_mse_per_item'])} items")
    return "\n".join(lines)


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
