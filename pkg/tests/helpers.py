"""Shared oracles for the test suite."""
import numpy as np

from longclin import tensor as T


def numeric_grad(f, x: T.Tensor, step: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data``.

    ``index`` restricts the probe to a subset of flat positions (others stay 0).
    """
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    positions = range(flat.size) if index is None else index
    with T.no_grad():
        for i in positions:
            keep = flat[i]
            flat[i] = keep + step
            up = f()
            flat[i] = keep - step
            down = f()
            flat[i] = keep
            out[i] = (up - down) / (2 * step)
    return out.reshape(x.shape)


def check_grads(build, params, rtol: float = 1e-6, step: float = 1e-5, floor: float = 1e-8):
    """Analytic gradients of ``build()`` match central differences elementwise."""
    for p in params:
        p.grad = None
    T.backward(build())
    for p in params:
        num = numeric_grad(lambda: build().item(), p, step=step)
        big = np.abs(num) > floor
        rel = np.abs(p.grad - num)[big] / np.abs(num)[big]
        assert rel.size == 0 or rel.max() <= rtol, f"max relative error {rel.max():.3e}"
        np.testing.assert_allclose(p.grad[~big], 0.0, atol=10 * floor + step)


def run_cli(*argv) -> int:
    from longclin.cli import main
    return main([str(a) for a in argv])


def run_pipeline(root, seed: int = 0, kind: str = "doc-cls") -> dict:
    """gen-synthetic -> preprocess -> train-tokenizer -> pretrain -> finetune -> evaluate."""
    from pathlib import Path
    root = Path(root)
    d = {name: root / name for name in ("data", "notes", "clean", "tok", "pre", "ft", "eval")}
    model = ["--layers", 1, "--heads", 2, "--dim", 16, "--ffn-dim", 32, "--max-positions", 256,
             "--window", 9, "--dtype", "float64"]
    steps = [
        ["gen-synthetic", "--out", d["data"], "--kind", kind, "--size", 40, "--dev-size", 16,
         "--test-size", 16, "--doc-words", 30, "--seed", seed],
        ["gen-synthetic", "--out", d["notes"], "--kind", "mlm-text", "--size", 30,
         "--sentences", 3, "--seed", seed],
        ["preprocess", "--out", d["clean"], "--input", d["notes"] / "train.txt"],
        ["train-tokenizer", "--out", d["tok"], "--input", d["clean"] / "corpus.txt",
         "--vocab-size", 400],
        ["pretrain", "--out", d["pre"], "--corpus", d["clean"] / "corpus.txt",
         "--tokenizer", d["tok"] / "tokenizer.json", "--steps", 4, "--batch-size", 2,
         "--lr", 1e-3, "--max-len", 64, "--seed", seed, *model],
        ["finetune", "--out", d["ft"], "--checkpoint", d["pre"] / "model.ckpt",
         "--tokenizer", d["tok"] / "tokenizer.json", "--data", d["data"] / "dataset.json",
         "--lr-sweep", "1e-3,3e-3", "--epochs", 2, "--max-len", 128, "--seed", seed],
        ["evaluate", "--out", d["eval"], "--checkpoint", d["ft"] / "best.ckpt",
         "--tokenizer", d["tok"] / "tokenizer.json", "--data", d["data"] / "dataset.json"],
    ]
    for argv in steps:
        code = run_cli(*argv)
        assert code == 0, f"{argv[0]} exited with {code}"
    return d
