import numpy as np
import pytest

from atflrec.model import ATFLRec, Batch, EncoderConfig, ModelConfig, VariantConfig

TINY_ENCODER = EncoderConfig(d_model=8, n_layers=1, n_heads=2, ffn_width=16, vocab_size=50, dropout=0.0)
TINY_MELS = 6


def tiny_model(variant="DualLora", seed=0, intra="max", cross="sum", encoder=TINY_ENCODER, n_mels=TINY_MELS):
    cfg = ModelConfig(encoder=encoder, variant=VariantConfig(variant, intra, cross), n_mels=n_mels)
    return ATFLRec(cfg, seed=seed)


def random_batch(rng, encoder=TINY_ENCODER, n_mels=TINY_MELS, size=3, n_items=4, audio=True, max_words=10):
    ids = np.zeros((size, encoder.max_len), dtype=np.int64)
    mask = np.zeros((size, encoder.max_len), dtype=np.int64)
    for b in range(size):
        n = int(rng.integers(2, max_words + 1))
        ids[b, :n] = rng.integers(1, encoder.vocab_size, n)
        mask[b, :n] = 1
    labels = rng.integers(0, 2, size).astype(float)
    batch = Batch(ids, mask, labels)
    if audio:
        lengths = rng.integers(2, 6, n_items)
        batch.frames = rng.normal(size=(int(lengths.sum()), n_mels))
        batch.offsets = np.concatenate([[0], np.cumsum(lengths)])
        for _ in range(size):
            k = int(rng.integers(0, n_items))
            batch.liked_idx.append(sorted(rng.choice(n_items, k, replace=False).tolist()))
            batch.target_idx.append(int(rng.integers(0, n_items)))
    return batch


def randomize_adapters(model, rng, scale=0.3):
    """Give every LoRA B a nonzero value so the adapters actually act."""
    for name, p in model.trainable_parameters().items():
        if name.endswith(".B"):
            p.data[...] = rng.normal(0.0, scale, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fake_samples(rng, n, encoder=TINY_ENCODER, n_mels=TINY_MELS, n_items=12, max_words=8):
    """RecSamples with random tokens, audio and balanced labels."""
    from atflrec.data import RecSample
    from atflrec.text import TokenSequence

    audio = {f"i{j}": rng.normal(size=(int(rng.integers(2, 5)), n_mels)) for j in range(n_items)}
    out = []
    for s in range(n):
        k = int(rng.integers(2, max_words + 1))
        ids = np.zeros(encoder.max_len, dtype=np.int64)
        mask = np.zeros(encoder.max_len, dtype=np.int64)
        ids[:k], mask[:k] = rng.integers(1, encoder.vocab_size, k), 1
        liked = tuple(f"i{j}" for j in rng.choice(n_items, int(rng.integers(0, 3)), replace=False))
        target = f"i{int(rng.integers(0, n_items))}"
        out.append(
            RecSample(
                f"sample {s}", TokenSequence(ids, mask, k), liked, target, s % 2,
                [audio[i] for i in liked], audio[target],
            )
        )
    return out


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
