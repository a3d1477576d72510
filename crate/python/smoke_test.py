"""Smoke test of the Python extension against the shipped checkpoint.

Build and install first:  pip install maturin && maturin develop -m crates/python/Cargo.toml --release
"""
import json
import pathlib
import sys

import heta

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    model = heta.Model.load(str(ROOT / "assets" / "planted.ckpt"))
    assert "KEY" in model.vocab

    record = json.loads(heta.generate_corpus(1, seed=7)[0])
    words = record["segment1"] + ["<s>"] + record["segment2"] + ["<s>"] + record["question"] + [record["answer"]]
    text = " ".join(words)
    evidence = len(record["segment1"]) + 1 + record["support"][0]

    scores = model.attribute(text)
    assert len(scores) == len(words) - 1
    assert all(s >= 0 for s in scores)
    assert max(range(len(scores)), key=scores.__getitem__) == evidence, scores

    again = model.attribute(text, variant="lr+win", window=8)
    assert len(again) == len(scores)

    report = json.loads(model.report(text, beta=0.8, gamma=0.2))
    assert report["target_token"] == record["answer"]
    assert report["scores"][evidence]["token"] == words[evidence]

    grad = model.baseline(text, "grad")
    assert len(grad) == len(scores)

    probs = model.next_token_probs(" ".join(words[:-1]))
    assert abs(sum(probs) - 1.0) < 1e-9

    for bad in (dict(bta=1.0), dict(beta=-1.0)):
        try:
            model.attribute(text, **bad)
        except ValueError:
            pass
        else:
            raise AssertionError(f"accepted {bad}")
    try:
        heta.Model.load(str(ROOT / "missing.ckpt"))
    except OSError:
        pass
    else:
        raise AssertionError("loaded a missing checkpoint")

    print(f"heta {heta.__version__}: python smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
