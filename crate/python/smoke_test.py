"""Smoke test for the `kist` extension module.

Build first:  cargo build --release -p kist-py
Then run:     python3 python/smoke_test.py
"""

import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_kist():
    lib = os.environ.get("KIST_LIB", os.path.join(ROOT, "target", "release", "libkist.so"))
    if not os.path.exists(lib):
        sys.exit(f"missing {lib}; run `cargo build --release -p kist-py`")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "kist.so"))
    sys.path.insert(0, tmp)
    import kist

    return kist, tmp


def main():
    kist, tmp = import_kist()

    kb = kist.KnowledgeBase.kole_mvtec()
    assert kb.rule_count > 0
    dark_blob = {"area": 0.03, "gray": 0.15, "shape": 0.9, "unevenness": 0.02, "symmetry": 0.9}
    grades = kb.rule_grades(dark_blob)
    assert abs(kb.anomaly_grade(dark_blob) - max(grades)) < 1e-12

    data = kist.generate(size=32, normals=6, anomalous=2, test=4, seed=3)
    assert len(data["normal"]) == 6 and len(data["test_masks"]) == 4

    ts = kist.threshold_set(0.01, 0.002, 0.3)
    assert len(ts) == 7 and all(a < b for a, b in zip(ts, ts[1:]))

    image = data["anomalous"][0]
    truth = data["anomalous_masks"][0]
    regions = kist.grade_regions(truth, image, kb)
    assert regions and all(0.0 <= r["grade"] <= 1.0 for r in regions)

    model = kist.Model(input_size=32, widths=[4, 8], latent_channels=4, seed=1)
    recon = model.forward(image)
    assert len(recon) == 32 and all(0.0 <= v <= 1.0 for row in recon for v in row)
    residual = model.residual(image)
    assert abs(residual[5][7] - (recon[5][7] - image[5][7]) ** 2) < 1e-12

    label = kist.pseudo_label(image, residual, kb, ts, 0.8)
    assert len(label) == 32 and all(v in (0, 1) for row in label for v in row)

    filtered = kist.guided_filter(image, residual, 2, 1e-4)
    assert len(filtered) == 32

    perfect = [[[float(v) for v in row] for row in m] for m in data["test_masks"]]
    assert abs(kist.auroc(perfect, data["test_masks"]) - 1.0) < 1e-12
    assert abs(kist.aupro(perfect, data["test_masks"], 0.3) - 1.0) < 1e-9

    trained, labels = kist.train(
        data["normal"], data["anomalous"], kb, iterations=1, epochs=2, seed=1, widths=[4, 8], latent_channels=4
    )
    assert len(labels) == 1 and len(labels[0]) == 2
    maps = kist.score_maps(trained, data["test"], filtered=True)
    score = kist.auroc(maps, data["test_masks"])
    assert 0.0 <= score <= 1.0

    path = os.path.join(tmp, "model.ckpt")
    trained.save(path)
    again = kist.Model.load(path)
    assert again.forward(image) == trained.forward(image)

    try:
        kist.Model(input_size=30)
    except ValueError:
        pass
    else:
        raise AssertionError("bad input size accepted")

    shutil.rmtree(tmp)
    print(f"smoke test ok: {kb.rule_count} rules, {trained.parameter_count} parameters, test AUROC {score:.3f}")


if __name__ == "__main__":
    main()
