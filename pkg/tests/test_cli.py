import os

import numpy as np
import pytest

from vidbase import aggregate, cli, data


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = run("gen-synthetic", "--out", str(out), "--seed", "1",
               "--labels", "4", "--videos", "200", "--dim", "8",
               "--frames-min", "4", "--frames-max", "12")
    assert code == cli.EXIT_OK
    return out


def test_gen_synthetic_split_and_artifacts(corpus):
    parts = {p: data.read_features(os.path.join(corpus, "%s.features" % p))
             for p in ("train", "validate", "test")}
    assert len(parts["train"]) == 140
    assert len(parts["validate"]) == 40
    assert len(parts["test"]) == 20
    ids = [ex.features.video_id for exs in parts.values() for ex in exs]
    assert len(set(ids)) == 200
    with open(os.path.join(corpus, "vocab.txt")) as fh:
        assert len(fh.read().splitlines()) == 4
    with open(os.path.join(corpus, "train.manifest")) as fh:
        text = fh.read()
    assert "config_hash=" in text and "seed=1" in text


def test_gen_synthetic_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run("gen-synthetic", "--out", str(out), "--seed", "9",
            "--labels", "2", "--videos", "30", "--dim", "4")
    for part in ("train", "validate", "test"):
        assert (a / ("%s.features" % part)).read_bytes() == \
            (b / ("%s.features" % part)).read_bytes()


def test_preprocess_refuses_leaky_fit(corpus, tmp_path):
    code = run("preprocess", "--data", str(corpus), "--out", str(tmp_path / "p"),
               "--fit-partition", "test")
    assert code == cli.EXIT_USAGE
    code = run("preprocess", "--data", str(corpus), "--out", str(tmp_path / "p"),
               "--fit-partition", "test", "--allow-fit-partition")
    assert code == cli.EXIT_OK


@pytest.fixture(scope="module")
def preprocessed(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    code = run("preprocess", "--data", str(corpus), "--out", str(out))
    assert code == cli.EXIT_OK
    return out


def test_preprocess_outputs(preprocessed):
    assert os.path.exists(os.path.join(preprocessed, "transform.pca"))
    assert os.path.exists(os.path.join(preprocessed, "quantizer.qnt"))
    with open(os.path.join(preprocessed, "report.txt")) as fh:
        report = dict(line.split("=", 1) for line in fh.read().splitlines())
    assert float(report["quantization_relative_rmse"]) < 0.05
    examples = data.read_features(os.path.join(preprocessed, "train.features"))
    assert examples[0].features.dim == 8


def test_encode_stats_dimension(corpus, tmp_path):
    out = tmp_path / "enc"
    code = run("encode", "--data", str(corpus), "--out", str(out),
               "--method", "stats", "--topk", "5")
    assert code == cli.EXIT_OK
    _, mat, layout = aggregate.read_descriptors(str(out / "train.desc"))
    # mean (D) + std (D) + top5 (5D) = 7D
    assert mat.shape[1] == 7 * 8
    names = [name for name, _, _ in layout]
    assert names == ["mean", "std", "topk"]


def test_encode_fisher_dimension(corpus, tmp_path):
    out = tmp_path / "fv"
    code = run("encode", "--data", str(corpus), "--out", str(out),
               "--method", "fisher", "--mixtures", "3",
               "--codebook-sample", "2000")
    assert code == cli.EXIT_OK
    _, mat, _ = aggregate.read_descriptors(str(out / "train.desc"))
    assert mat.shape[1] == 2 * 3 * 8


def test_encode_vlad_dimension(corpus, tmp_path):
    out = tmp_path / "vl"
    code = run("encode", "--data", str(corpus), "--out", str(out),
               "--method", "vlad", "--clusters", "4",
               "--codebook-sample", "2000")
    assert code == cli.EXIT_OK
    _, mat, _ = aggregate.read_descriptors(str(out / "train.desc"))
    assert mat.shape[1] == 4 * 8
    assert np.allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-5)


@pytest.fixture(scope="module")
def encoded(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("desc")
    code = run("encode", "--data", str(corpus), "--out", str(out),
               "--method", "stats")
    assert code == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def bank(corpus, encoded, tmp_path_factory):
    out = tmp_path_factory.mktemp("bank")
    code = run("train", "--descriptors", str(encoded),
               "--vocab-dir", str(corpus), "--out", str(out),
               "--model", "moe", "--level", "video", "--iterations", "5",
               "--seed", "2")
    assert code == cli.EXIT_OK
    return out


def test_train_writes_index_and_models(bank):
    with open(os.path.join(bank, "index.txt")) as fh:
        lines = fh.read().splitlines()
    model_lines = [l for l in lines if l.startswith("model ")]
    assert len(model_lines) == 4
    assert any(l.startswith("config_hash=") for l in lines)
    for line in model_lines:
        fname = line.split()[2]
        assert os.path.exists(os.path.join(bank, fname))


def test_train_deterministic_across_workers(corpus, encoded, tmp_path):
    outs = []
    for tag, workers in (("w1", "1"), ("w4", "4")):
        out = tmp_path / tag
        code = run("train", "--descriptors", str(encoded),
                   "--vocab-dir", str(corpus), "--out", str(out),
                   "--model", "logistic", "--iterations", "3",
                   "--seed", "5", "--workers", workers)
        assert code == cli.EXIT_OK
        outs.append(out)
    for name in os.listdir(outs[0]):
        if name.endswith(".bin"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_predict_evaluate_oracle_roundtrip(corpus, encoded, bank, tmp_path):
    preds = tmp_path / "preds.txt"
    code = run("predict", "--bank", str(bank), "--descriptors", str(encoded),
               "--partition", "test", "--out", str(preds))
    assert code == cli.EXIT_OK
    assert preds.exists()

    report = tmp_path / "report.txt"
    code = run("evaluate", "--predictions", str(preds),
               "--descriptors", str(encoded), "--partition", "test",
               "--out", str(report))
    assert code == cli.EXIT_OK
    values = dict(line.split("=", 1) for line in report.read_text().splitlines())
    assert 0.0 <= float(values["mAP"]) <= 1.0
    assert 0.0 <= float(values["PERR"]) <= 1.0
    assert "Hit@1" in values and "Hit@5" in values

    code = run("oracle", "--predictions", str(preds),
               "--descriptors", str(encoded), "--partition", "test")
    assert code == cli.EXIT_OK


def test_frame_level_train_predict(corpus, tmp_path):
    bank = tmp_path / "fbank"
    code = run("train", "--data", str(corpus), "--out", str(bank),
               "--model", "logistic", "--level", "frame",
               "--iterations", "2", "--seed", "3")
    assert code == cli.EXIT_OK
    preds = tmp_path / "fpreds.txt"
    code = run("predict", "--bank", str(bank), "--data", str(corpus),
               "--partition", "validate", "--out", str(preds))
    assert code == cli.EXIT_OK
    examples = data.read_features(os.path.join(corpus, "validate.features"))
    n_lines = len(preds.read_text().splitlines())
    assert n_lines == len(examples) * 4


def test_exit_codes():
    # unknown flag -> usage
    assert run("gen-synthetic", "--nope") == cli.EXIT_USAGE
    # missing input directory -> data error
    assert run("preprocess", "--data", "/does/not/exist",
               "--out", "/tmp/vidbase-nope") == cli.EXIT_DATA
    # frame-level training without --data -> usage
    assert run("train", "--out", "/tmp/vidbase-nope2", "--level", "frame",
               "--vocab-dir", "/does/not/exist") in (cli.EXIT_USAGE,
                                                     cli.EXIT_DATA)


def test_evaluate_label_count_mismatch(corpus, tmp_path):
    preds = tmp_path / "short.txt"
    # predictions only cover 2 of the 4 labels
    examples = data.read_features(os.path.join(corpus, "test.features"))
    with open(preds, "w") as fh:
        for ex in examples:
            fh.write("%s 0 0.5\n%s 1 0.5\n"
                     % (ex.features.video_id, ex.features.video_id))
    code = run("evaluate", "--predictions", str(preds), "--data", str(corpus),
               "--partition", "test", "--out", str(tmp_path / "r.txt"))
    # refused either at prediction parsing (data) or label-count check (usage)
    assert code in (cli.EXIT_USAGE, cli.EXIT_DATA)
    assert not (tmp_path / "r.txt").exists()
