"""Corpus loading, the synthetic speech-like corpus, and batching."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import FeatureConfig, MelSpectrogram, load_mel, read_wav, save_mel, wave_to_mel, write_wav
from .text import Vocabulary, normalize_text, tokenize

log = logging.getLogger(__name__)

METADATA = "metadata.txt"
SYNTH_ALPHABET = "abcdefgh"


@dataclass
class Utterance:
    id: str
    speaker_id: str
    token_ids: list
    mel: MelSpectrogram
    text: str = ""

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise ValueError(f"{self.id}: empty token sequence")
        if self.mel.frame_count < len(self.token_ids):
            raise ValueError(f"{self.id}: fewer frames ({self.mel.frame_count}) than tokens ({len(self.token_ids)})")


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, N) long, 0 = pad
    token_mask: torch.Tensor  # (B, N) bool
    mels: torch.Tensor  # (B, M, n_mels)
    mel_mask: torch.Tensor  # (B, M) bool
    n_lens: torch.Tensor
    m_lens: torch.Tensor
    speaker_ids: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]

    def to(self, dtype):
        return replace(self, mels=self.mels.to(dtype))

    def select(self, keep):
        keep = [int(k) for k in keep]
        idx = torch.tensor(keep, dtype=torch.long)
        n_max = int(self.n_lens[idx].max())
        m_max = int(self.m_lens[idx].max())
        return Batch(
            self.tokens[idx, :n_max],
            self.token_mask[idx, :n_max],
            self.mels[idx, :m_max],
            self.mel_mask[idx, :m_max],
            self.n_lens[idx],
            self.m_lens[idx],
            [self.speaker_ids[k] for k in keep],
            [self.ids[k] for k in keep],
        )


def collate(utts, dtype=torch.float32) -> Batch:
    if not utts:
        raise ValueError("cannot collate an empty list")
    B = len(utts)
    n_lens = torch.tensor([len(u.token_ids) for u in utts], dtype=torch.long)
    m_lens = torch.tensor([u.mel.frame_count for u in utts], dtype=torch.long)
    n_max, m_max = int(n_lens.max()), int(m_lens.max())
    n_mels = utts[0].mel.frames.shape[1]
    tokens = torch.zeros(B, n_max, dtype=torch.long)
    mels = torch.zeros(B, m_max, n_mels, dtype=dtype)
    for b, u in enumerate(utts):
        tokens[b, : len(u.token_ids)] = torch.as_tensor(u.token_ids, dtype=torch.long)
        mels[b, : u.mel.frame_count] = torch.as_tensor(np.asarray(u.mel.frames), dtype=dtype)
    token_mask = torch.arange(n_max)[None] < n_lens[:, None]
    mel_mask = torch.arange(m_max)[None] < m_lens[:, None]
    return Batch(tokens, token_mask, mels, mel_mask, n_lens, m_lens, [u.speaker_id for u in utts], [u.id for u in utts])


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------


def read_metadata(root):
    root = Path(root)
    meta = root / METADATA
    if not meta.exists():
        raise FileNotFoundError(f"missing {meta}")
    rows = []
    for lineno, line in enumerate(meta.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise ValueError(f"{meta}:{lineno}: expected id|speaker|transcript|wav_path")
        rows.append(tuple(parts))
    return rows


def load_corpus(root, vocab: Vocabulary = None, config: FeatureConfig = None) -> list:
    """Load every utterance listed in ``root/metadata.txt``.

    Without an explicit ``vocab`` the corpus ``vocab.txt`` is used if present,
    otherwise the vocabulary is built from the transcripts.
    Cached mels written by ``prepare`` (``root/mels/<id>.npz``) are used when
    their config hash matches. Missing/unreadable wavs and utterances with
    fewer frames than tokens are skipped with a warning.
    """
    root = Path(root)
    config = config or FeatureConfig()
    rows = read_metadata(root)
    if vocab is None:
        saved = root / "vocab.txt"
        vocab = Vocabulary.load(saved) if saved.exists() else Vocabulary.from_texts(r[2] for r in rows)
    utts = []
    for uid, spk, transcript, rel in rows:
        cached = root / "mels" / f"{uid}.npz"
        mel = None
        if cached.exists():
            mel = load_mel(cached)
            if mel.config_hash != config.config_hash:
                mel = None
        if mel is None:
            try:
                mel = wave_to_mel(read_wav(root / rel, config.sample_rate_hz), config)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: cannot read %s (%s)", uid, rel, exc)
                continue
        try:
            tokens = tokenize(transcript, vocab)
        except ValueError as exc:
            log.warning("skipping %s: %s", uid, exc)
            continue
        if mel.frame_count < len(tokens):
            log.warning("dropping %s: %d frames < %d tokens", uid, mel.frame_count, len(tokens))
            continue
        utts.append(Utterance(uid, spk, tokens, mel, normalize_text(transcript)))
    return utts


def prepare_corpus(root, config: FeatureConfig = None) -> int:
    """Featurise every wav of a corpus into ``root/mels`` and write ``vocab.txt``."""
    root = Path(root)
    config = config or FeatureConfig()
    utts = load_corpus(root, config=config)
    (root / "mels").mkdir(exist_ok=True)
    for u in utts:
        save_mel(root / "mels" / f"{u.id}.npz", u.mel)
    Vocabulary.from_texts(u.text for u in utts).save(root / "vocab.txt")
    return len(utts)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticVoice:
    f0_hz: float
    tilt: float  # harmonic amplitude ~ h ** -tilt
    formant_scale: float


def synthetic_voice(seed: int, speaker_index: int) -> SyntheticVoice:
    """Voice parameters depend only on ``(seed, speaker_index)``, so a corpus
    with more speakers extends one with fewer."""
    rng = np.random.default_rng([seed, 1, speaker_index])
    # half-octave F0 ladder: speakers two apart are an octave apart
    f0 = 90.0 * 2.0 ** (speaker_index / 2.0) * rng.uniform(0.98, 1.02)
    tilt = 0.5 + 0.35 * (speaker_index % 4) + rng.uniform(-0.05, 0.05)
    scale = rng.uniform(0.85, 1.2)
    return SyntheticVoice(float(f0), float(tilt), float(scale))


def _symbol_formants(seed, alphabet):
    out = {}
    for i, ch in enumerate(alphabet):
        rng = np.random.default_rng([seed, 2, i])
        out[ch] = (rng.uniform(300, 900), rng.uniform(1000, 2600), rng.uniform(2800, 4200))
    return out


def render_utterance(transcript, voice: SyntheticVoice, formants, rng, frames_per_symbol=8, config=None):
    """Concatenate one harmonic segment per symbol; ``m = len(transcript) * frames_per_symbol``."""
    config = config or FeatureConfig()
    hop, sr = config.hop_length, config.sample_rate_hz
    seg = frames_per_symbol * hop
    f0 = voice.f0_hz * rng.uniform(0.98, 1.02)
    n_harm = int((sr / 2 - 200) // f0)
    harm = np.arange(1, n_harm + 1)
    phase = rng.uniform(0, 2 * np.pi, n_harm)
    t = np.arange(seg) / sr
    pieces = []
    for ch in transcript:
        fh = harm * f0
        env = np.ones(n_harm)
        for k, fc in enumerate(formants[ch]):
            fc = fc * voice.formant_scale
            env += (4.0 - k) * np.exp(-0.5 * ((fh - fc) / 120.0) ** 2)
        amp = env * harm ** (-voice.tilt)
        args = 2 * np.pi * fh[None, :] * t[:, None] + phase[None, :]
        pieces.append(np.sin(args) @ amp)
        phase = (phase + 2 * np.pi * fh * seg / sr) % (2 * np.pi)
    wave = np.concatenate(pieces)
    wave = 0.5 * wave / np.max(np.abs(wave))
    wave = wave + 1e-3 * rng.standard_normal(len(wave))
    # trim one hop so centred framing yields exactly len(transcript) * frames_per_symbol frames
    return wave[: len(wave) - hop]


def make_synthetic_corpus(n_speakers, utts_per_speaker, seed, out, frames_per_symbol=8, min_len=4, max_len=8,
                          alphabet=SYNTH_ALPHABET, config=None, speaker_offset=0):
    """Write ``metadata.txt`` + ``wavs/`` for a deterministic synthetic corpus.

    Speaker ``k`` is named ``spk{k}``; its voice and utterances depend only on
    ``(seed, k)``.
    """
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if utts_per_speaker < 1:
        raise ValueError("need at least 1 utterance per speaker")
    config = config or FeatureConfig()
    out = Path(out)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    formants = _symbol_formants(seed, alphabet)
    lines = []
    for k in range(speaker_offset, speaker_offset + n_speakers):
        voice = synthetic_voice(seed, k)
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, 3, k, u])
            length = int(rng.integers(min_len, max_len + 1))
            transcript = "".join(rng.choice(list(alphabet), size=length))
            wave = render_utterance(transcript, voice, formants, rng, frames_per_symbol, config)
            uid = f"spk{k}_{u:03d}"
            write_wav(out / "wavs" / f"{uid}.wav", wave, config.sample_rate_hz)
            lines.append(f"{uid}|spk{k}|{transcript}|wavs/{uid}.wav")
    (out / METADATA).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def by_speaker(utts):
    groups = {}
    for u in utts:
        groups.setdefault(u.speaker_id, []).append(u)
    return groups
