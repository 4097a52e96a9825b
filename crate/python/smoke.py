"""Smoke test for the Python extension.

Build first:
    cargo build -p maskprompt-py --release --features extension-module
then run:
    python3 python/smoke.py
"""

import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_extension(workdir):
    candidates = [os.environ.get("MASKPROMPT_LIB")]
    for profile in ("release", "debug"):
        candidates.append(ROOT / "target" / profile / "libmaskprompt_py.so")
    for c in candidates:
        if c and Path(c).exists():
            shutil.copy(c, Path(workdir) / "maskprompt.so")
            sys.path.insert(0, str(workdir))
            import maskprompt

            return maskprompt
    sys.exit("libmaskprompt_py.so not found; build the maskprompt-py crate first")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        mp = import_extension(tmp)
        assert len(mp.style_labels()) == 14

        mc = mp.mask_caption("a red dress with white lace, black boots and a hat", 0.5, seed=3)
        assert len(mc.maskable) == 7 and len(mc.mask_positions) == 4
        fill = [("blue" if i in mc.mask_positions else t) for i, t in enumerate(mc.tokens)]
        ok, reason = mc.validate(" ".join(fill))
        assert ok, reason
        ok, reason = mc.validate(mc.masked_text)
        assert not ok and reason == "unfilled mask"
        print("masked:", mc.masked_text)

        print(mp.render_prompt("class", class_name="lolita"))
        img = [[float((x * 7 + y * 3) % 256) for x in range(16)] for y in range(16)]
        assert mp.ssim(img, img) == 1.0
        assert abs(mp.mmd([[0.0, 0.0]], [[10.0, 10.0]]) - 1000 * (2 - 2 * 2.718281828459045 ** -1)) < 1e-6

        labels = ["rock", "lolita"]
        real = mp.Embeddings([[1.0, 0.0], [0.0, 1.0]], labels)
        back = mp.Embeddings.from_bytes(real.to_bytes())
        assert back.rows() == real.rows()
        probe = mp.train_probe(real, real, classes=labels, config=json.dumps({"lr": 0.05, "max_epochs": 30}))
        assert probe.predict(real) == labels
        print("probe best epoch:", probe.history()["best_epoch"])

        data = Path(tmp) / "data"
        mp.write_mock_dataset(str(data), train=2, val=1, test=2, size=24)
        cfg = Path(tmp) / "config.json"
        cfg.write_text(json.dumps({
            "dataset_root": str(data),
            "output_dir": str(Path(tmp) / "out"),
            "seeds": [0],
            "generation": {"samples_per_style": 2, "width": 24, "height": 24},
            "training": {"max_epochs": 10},
        }))
        report = mp.run(str(cfg), mock=True)
        assert all(c["status"] == "ok" for c in report["cells"]), report["cells"]
        for row in report["accuracy"]:
            print(row["method"], row["n_shot"], row["mean"])
        try:
            mp.load_config(str(cfg) + ".missing")
        except ValueError:
            pass
        else:
            raise AssertionError("missing config accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
