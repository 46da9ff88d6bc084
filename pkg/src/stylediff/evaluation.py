"""Objective evaluation: speaker-embedding cosine similarity (SECS) and teacher-forced mel error.

Speaker embeddings come from the model's own mel-style encoder, applied to
normalised mels.
"""

import json

import numpy as np
import torch

from .data import by_speaker, collate
from .style import MIN_FRAMES, cosine_similarity, encode_style


def secs(mel_a, mel_b, encoder) -> float:
    """Cosine similarity between the style embeddings of two ``(m, n_mels)`` mels."""
    return cosine_similarity(encode_style(mel_a, encoder), encode_style(mel_b, encoder))


def secs_pairs(utts, n_pairs, seed=0, target_speakers=None):
    """Sample ``(target, reference, control)`` triples.

    The reference is another utterance of the target's speaker; the control
    is an utterance of a different speaker. Targets are drawn from speakers
    with at least two utterances (optionally restricted to ``target_speakers``).
    """
    groups = by_speaker(utts)
    if len(groups) < 2:
        raise ValueError("SECS evaluation needs at least two speakers")
    eligible = sorted(s for s, us in groups.items() if len(us) >= 2
                      and (target_speakers is None or s in target_speakers))
    if not eligible:
        raise ValueError("no speaker with two or more utterances to evaluate")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    speakers = sorted(groups)
    out = []
    for _ in range(n_pairs):
        spk = eligible[rng.integers(len(eligible))]
        pool = groups[spk]
        i, j = rng.choice(len(pool), size=2, replace=False)
        others = [s for s in speakers if s != spk]
        other = groups[others[rng.integers(len(others))]]
        out.append((pool[i], pool[j], other[rng.integers(len(other))]))
    return out


def evaluate_secs(model, utts, n_pairs, seed=0, n_steps=100, solver="ml", temperature=1.0, target_speakers=None):
    """Zero-shot SECS of ``model`` on normalised utterances ``utts``.

    For each sampled target the text is synthesised with the style of the
    reference utterance, then embedded and compared against the target's
    ground truth (``secs``) and against the control speaker's ground truth
    (``control_secs``). Returns ``{"rows": [...], "same": summary, "cross": summary}``.
    Syntheses shorter than the style encoder's minimum length get ``null``
    scores and are left out of the summaries.
    """
    rows = []
    encoder = model.style_encoder
    for k, (tgt, ref, ctl) in enumerate(secs_pairs(utts, n_pairs, seed, target_speakers)):
        mel, _, durations = model.synthesize(tgt.token_ids, ref.mel.frames, n_steps, solver, temperature,
                                             seed=seed * 100003 + k)
        row = {"target": tgt.id, "reference": ref.id, "control": ctl.id, "frames": int(durations.sum()),
               "secs": None, "control_secs": None}
        if mel.shape[0] >= MIN_FRAMES:
            e_syn = encode_style(mel.numpy(), encoder)
            row["secs"] = cosine_similarity(e_syn, encode_style(tgt.mel.frames, encoder))
            row["control_secs"] = cosine_similarity(e_syn, encode_style(ctl.mel.frames, encoder))
        rows.append(row)
    return {"rows": rows, "same": _summary("same_speaker", [r["secs"] for r in rows]),
            "cross": _summary("cross_speaker", [r["control_secs"] for r in rows])}


def _summary(name, values):
    kept = [v for v in values if v is not None]
    if not kept:
        return {"summary": name, "mean": None, "std": None, "n": 0, "skipped": len(values)}
    return {"summary": name, "mean": float(np.mean(kept)), "std": float(np.std(kept)), "n": len(kept),
            "skipped": len(values) - len(kept)}


def format_report(report) -> str:
    """One JSON object per pair, then the same-speaker and cross-speaker summaries."""
    lines = [json.dumps(r, sort_keys=True) for r in report["rows"]]
    lines += [json.dumps(report["same"], sort_keys=True), json.dumps(report["cross"], sort_keys=True)]
    return "\n".join(lines) + "\n"


@torch.no_grad()
def teacher_forced_l1(model, utts, n_steps=50, solver="ml", seed=0, batch_size=8):
    """Mean absolute error between sampled and ground-truth (normalised) mels,
    using aligner durations and each utterance's own style."""
    total, count = 0.0, 0.0
    dtype = next(model.parameters()).dtype
    for start in range(0, len(utts), batch_size):
        batch = collate(utts[start:start + batch_size], dtype)
        mel, _ = model.synthesize_batch_teacher_forced(batch, n_steps=n_steps, solver=solver, seed=seed + start)
        m = batch.mel_mask.unsqueeze(-1).to(dtype)
        total += float(((mel - batch.mels).abs() * m).sum())
        count += float(m.sum()) * batch.mels.shape[-1]
    return total / count
