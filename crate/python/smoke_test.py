"""Smoke test for the sedkit extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/sedkit-*.whl
"""

import json
import math
import tempfile
from pathlib import Path

import sedkit


def main():
    assert sedkit.tag_order() == ["/p", "/b", "/r", "[]", "/i"]
    assert sedkit.parse_tags("so um /i I went /b to the [] /p store") == [1, 1, 0, 1, 1]
    assert sedkit.task_config("three") == ["/p", "[]", "/i"]

    tone = [0.3 * math.sin(2 * math.pi * 440 * n / 16000) for n in range(16000)]
    feats = sedkit.fbank(tone, 16000)
    assert len(feats) == 98 and len(feats[0]) == 80

    bce = sedkit.bce_with_logits([[1.0, 0.0]], [[0.0, 0.0]])
    assert abs(bce - math.log(2)) < 1e-9
    focal = sedkit.focal_loss([[1.0, 0.0]], [[0.0, 0.0]], gamma=0.0, alpha=None)
    assert abs(focal - bce) < 1e-9

    f1, mean = sedkit.f1_scores([[1, 0, 1, 0, 1]] * 2, [[1, 0, 1, 0, 0]] * 2)
    assert f1[0] == 1.0 and f1[4] == 0.0 and abs(mean - sum(f1) / 5) < 1e-12

    split = sedkit.split_by_speaker(["a", "a", "b", "c", "d"], seed=3)
    assert split[0] == split[1]

    config = json.dumps({
        "num_blocks": 1, "d_model": 16, "heads": 2, "lstm_hidden": 8,
        "proj_dim": 8, "subsample_channels": 4,
    })
    model = sedkit.Model(config, seed=1)
    logits = model.forward(feats)
    assert len(logits) == 5
    labels = model.predict(feats)
    assert len(labels) == 5 and set(labels) <= {0, 1}

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        model.save(str(path))
        again = sedkit.Model.load(str(path))
        assert again.forward(feats) == logits
        assert again.num_parameters() == model.num_parameters()

        clips = sedkit.synth_generate(str(Path(tmp) / "synth"), num_clips=4, seed=2)
        assert len(clips) == 4
        samples, rate = sedkit.load_wav(str(clips[0][1]))
        assert rate == 16000 and len(samples) > 0

    try:
        sedkit.Model('{"d_model": 15, "heads": 2}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    code, _ = sedkit.run_cli(["no-such-command"])
    assert code != 0

    print("smoke test ok")


if __name__ == "__main__":
    main()
