"""Synthetic two-language speech corpus for desk-scale experiments.

Each "language" has its own phoneme inventory.  A phoneme is rendered as noise
shaped by two formant-like resonances whose centres are fixed per phoneme, so
words and transcripts stay consistent with the audio.  The English inventory
sits in a low band and the Mandarin one higher up; ``overlap`` slides the
Mandarin band down onto the English one (1.0 means the bands coincide and only
the phoneme identities differ).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Lexicon, Manifest, Utterance, make_lexicon, save_lexicon, save_manifest
from .dsp import AudioBuffer, write_wav

EN_PHONES = ("AA", "AE", "AH", "B", "D", "EH", "F", "IY", "K", "M", "N", "S", "T", "UW")
ZH_PHONES = ("a1", "a4", "b", "d", "e2", "g", "i3", "j", "m", "n", "o4", "sh", "u1", "x")
ZH_CHARS = "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学"

EN_BAND = (300.0, 1500.0)
BAND_SHIFT = 1500.0


@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 200
    duration_s: float = 2.0
    en_fraction: float = 0.5
    sample_rate_hz: int = 16000
    overlap: float = 0.0
    words_per_language: int = 40
    noise_level: float = 0.02
    corpus_tag: str = "synth"

    def __post_init__(self):
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if not 0.0 <= self.en_fraction <= 1.0:
            raise ValueError("en_fraction must be in [0, 1]")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        if self.duration_s < 0.2:
            raise ValueError("duration_s must be at least 0.2")


def phone_formants(language: str, overlap: float, seed: int = 1234) -> dict[str, tuple[float, float]]:
    """Two resonance centres (Hz) per phoneme; the same for every corpus built with ``seed``."""
    rng = np.random.default_rng(seed + (0 if language == "en" else 1))
    lo, hi = EN_BAND
    if language == "zh":
        shift = (1.0 - overlap) * BAND_SHIFT
        lo, hi = lo + shift, hi + shift
        phones = ZH_PHONES
    else:
        phones = EN_PHONES
    out = {}
    for p in phones:
        f1 = rng.uniform(lo, hi)
        out[p] = (float(f1), float(f1 + rng.uniform(200.0, 700.0)))
    return out


def make_lexicons(words_per_language: int = 40, seed: int = 1234) -> dict[str, Lexicon]:
    rng = np.random.default_rng(seed + 2)
    en, zh = {}, {}
    while len(en) < words_per_language:
        phones = [str(p) for p in rng.choice(EN_PHONES, size=int(rng.integers(2, 5)))]
        en["".join(phones).lower()] = phones
    chars = list(ZH_CHARS)
    while len(zh) < words_per_language:
        n = int(rng.integers(1, 4))
        word = "".join(str(c) for c in rng.choice(chars, size=n))
        zh[word] = [str(p) for p in rng.choice(ZH_PHONES, size=2 * n)]
    return {"en": make_lexicon("en", en), "zh": make_lexicon("zh", zh)}


def _render_phone(formants, n: int, sr: int, rng) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    shape = np.zeros_like(freqs)
    for fc, bw in zip(formants, (120.0, 160.0)):
        shape += np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    seg = np.fft.irfft(spec * shape, n)
    seg /= np.sqrt(np.mean(seg**2)) + 1e-12
    ramp = min(n // 8, int(0.005 * sr))
    if ramp:
        env = np.ones(n)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        seg *= env
    return seg


def render_utterance(language: str, lexicon: Lexicon, formants, cfg: SynthConfig, rng):
    """Samples and the list of words fully spoken in the utterance."""
    sr = cfg.sample_rate_hz
    total = int(round(cfg.duration_s * sr))
    out = np.zeros(total)
    words = sorted(lexicon.entries)
    pos, spoken = int(rng.integers(0, int(0.1 * sr))), []
    while True:
        word = words[int(rng.integers(len(words)))]
        phones = [p.removesuffix("_cn") for p in lexicon[word].phonemes]
        lens = [int(rng.uniform(0.06, 0.14) * sr) for _ in phones]
        if pos + sum(lens) > total:
            break
        for p, n in zip(phones, lens):
            out[pos : pos + n] = _render_phone(formants[p], n, sr, rng)
            pos += n
        spoken.append(word)
        pos += int(rng.uniform(0.0, 0.08) * sr)
    out += cfg.noise_level * rng.standard_normal(total)
    gain = 0.3 * 10 ** (rng.uniform(-6, 6) / 20)
    out *= gain / (np.max(np.abs(out)) + 1e-12)
    return out, spoken


def synthesize_corpus(out_dir, cfg: SynthConfig = SynthConfig(), seed: int = 0, prefix: str = "") -> Manifest:
    """Write ``audio/*.wav``, ``manifest.jsonl`` and ``lexicon.{en,zh}.txt`` under ``out_dir``.

    Audio paths in the manifest are relative to ``out_dir``.  The language of
    utterance ``k`` is fixed by rounding, so ``en_fraction`` is honoured exactly
    up to one utterance; the order is then shuffled with ``seed``.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lexicons = make_lexicons(cfg.words_per_language)
    formants = {lang: phone_formants(lang, cfg.overlap) for lang in ("en", "zh")}
    n_en = int(round(cfg.en_fraction * cfg.n_utterances))
    langs = ["en"] * n_en + ["zh"] * (cfg.n_utterances - n_en)
    langs = [langs[i] for i in rng.permutation(len(langs))]
    entries = []
    for k, lang in enumerate(langs):
        samples, words = render_utterance(lang, lexicons[lang], formants[lang], cfg, rng)
        uid = f"{prefix}{lang}_{k:05d}"
        rel = f"audio/{uid}.wav"
        write_wav(out_dir / rel, AudioBuffer(samples, cfg.sample_rate_hz))
        entries.append(Utterance(uid, rel, 0.0, len(samples) / cfg.sample_rate_hz, lang, tuple(words), cfg.corpus_tag))
    manifest = Manifest(tuple(entries), provenance=f"synthetic overlap={cfg.overlap:g} seed={seed}")
    save_manifest(manifest, out_dir / "manifest.jsonl")
    for lang, lex in lexicons.items():
        save_lexicon(lex, out_dir / f"lexicon.{lang}.txt")
    return manifest
