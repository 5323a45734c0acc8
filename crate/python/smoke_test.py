"""Exercises the Python bindings end to end on synthetic data.

Build and install first:

    pip install maturin
    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import math
import os
import tempfile

import salientsleep_py as ssn


def main():
    counts = ssn.count_parameters()
    assert 800_000 < counts["total"] < 1_050_000, counts["total"]
    assert sum(counts["modules"].values()) == counts["total"]
    basic = ssn.count_parameters("u-basic")["total"]
    assert basic < counts["total"]
    print(f"full model: {counts['total']} parameters, u-basic: {basic}")

    labels = ssn.synthetic_hypnogram(12, seed=3)
    psg, hyp = ssn.synthetic_edf_pair(labels, seed=3)
    rec = ssn.parse_edf(psg)
    eeg = next(v for k, v in rec["signals"].items() if "Fpz-Cz" in k)
    assert eeg["sample_rate"] == 100.0
    assert len(eeg["samples"]) == 12 * 3000
    stages = ssn.parse_edf(hyp)["annotations"]
    assert stages, "hypnogram has no annotations"
    print(f"PSG signals: {sorted(rec['signals'])}; {len(stages)} hypnogram annotations")

    model = ssn.Model("full", "small", seed=1)
    n = model.seq_len * model.epoch_len
    x = [[[math.sin(t / 50.0), math.cos(t / 70.0)] for t in range(n)] for _ in range(2)]
    probs = model.predict(x)
    assert len(probs) == 2 and len(probs[0]) == model.seq_len
    for row in probs[0]:
        assert len(row) == 5 and abs(sum(row) - 1.0) < 1e-5

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ssnc")
        model.save(path)
        again = ssn.Model.load(path, "full", "small")
        assert again.predict(x) == probs

    try:
        model.predict([[[0.0, 0.0]] * 10])
    except ValueError as e:
        print(f"short input rejected: {e}")
    else:
        raise AssertionError("a short input was accepted")

    truth = [0, 1, 2, 2, 3, 4]
    guess = [0, 2, 2, 2, 3, 4]
    s = ssn.scores(guess, truth)
    assert abs(s["accuracy"] - 5 / 6) < 1e-12
    assert ssn.confusion(guess, truth)[1][2] == 1
    print(f"accuracy {s['accuracy']:.4f}, macro F1 {s['macro_f1']:.4f}")
    print("ok")


if __name__ == "__main__":
    main()
