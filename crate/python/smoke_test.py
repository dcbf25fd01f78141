"""Smoke test for the maskclip extension module.

Build first:  maturin develop -m crates/python/Cargo.toml --release
"""
import json
import math
import sys
import tempfile
from pathlib import Path

import maskclip


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    tmp = Path(tempfile.mkdtemp(prefix="maskclip-smoke-"))
    corpus = tmp / "corpus"
    n = maskclip.generate_corpus(16, 7, str(corpus))
    check(n == 16, "generate_corpus")
    records = maskclip.load_corpus(str(corpus))
    check(len(records) == 16 and records[0]["caption"], "load_corpus")

    tok = maskclip.Tokenizer()
    ids, eos = tok.tokenize(records[0]["caption"])
    check(len(ids) == 32 and 0 < eos < 32, "tokenize")

    check(maskclip.mask_count(16, 0.75) == 12, "mask_count")
    masked, visible = maskclip.sample_mask(16, 0.75, 3)
    check(sorted(masked + visible) == list(range(16)), "sample_mask partition")

    vals = maskclip.smooth_l1([0.0, 1.0, 5.0], [0.0, 0.0, 0.0], 2.0)
    check(abs(vals[1] - 0.25) < 1e-12 and abs(vals[2] - 4.0) < 1e-12, "smooth_l1")

    li, lt = maskclip.contrastive_loss([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], 1.0)
    expect = math.log(1 + math.e ** -1)
    check(abs(li - expect) < 1e-12 and abs(lt - expect) < 1e-12, "contrastive_loss")

    t = maskclip.ema_update([1.0, 2.0], [3.0, 4.0], 0.5)
    check(t == [2.0, 3.0], "ema_update")

    cfg = maskclip.default_config()
    cfg["epochs"] = 1
    trainer = maskclip.Trainer(str(corpus), json.dumps(cfg))
    history = trainer.run(str(tmp / "run"))
    check(trainer.finished and len(history) == trainer.total_steps, "trainer.run")
    ckpt = tmp / "model.mclp"
    trainer.save(str(ckpt))

    model = maskclip.Model.load(str(ckpt))
    check(model.summary()["step"] == trainer.step, "Model.load")
    r = model.retrieval(str(corpus))
    check(0.0 <= r["image_to_text"]["r1"] <= 1.0, "retrieval")
    seg = model.segment(str(corpus))
    check(0.0 <= seg["miou"] <= 1.0, "segment")
    grid = model.similarity_grid(str(corpus), records[0]["id"])
    check(len(grid) == 16 and all(-1.0 - 1e-9 <= v <= 1.0 + 1e-9 for v in grid), "similarity_grid")

    print("smoke test passed")


if __name__ == "__main__":
    main()
