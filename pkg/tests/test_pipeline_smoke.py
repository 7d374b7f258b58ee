"""End-to-end CLI pipeline on a 64-image corpus: plumbing and budget."""

import time


from scriptkd.cli import EXIT_OK, main


def test_full_pipeline_under_budget(tmp_path, capsys):
    start = time.monotonic()
    corpus = tmp_path / "corpus"
    ckpt = tmp_path / "ckpt"
    student_ckpt = tmp_path / "student"
    vocab = tmp_path / "vocab.bpe"

    assert main(["synth", "--out", str(corpus), "--texts", "32", "--seed", "7",
                 "--alphabet-size", "8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "images\t64" in out

    manifest = corpus / "manifest.tsv"
    assert main(["tokenizer-train", "--manifest", str(manifest),
                 "--vocab-size", "300", "--out", str(vocab)]) == EXIT_OK
    capsys.readouterr()

    common = ["--corpus-dir", str(corpus), "--manifest", str(manifest),
              "--vocab-path", str(vocab), "--seed", "7"]
    assert main(["train-teacher", *common, "--checkpoint-dir", str(ckpt),
                 "--patch", "64", "--d-v", "32", "--encoder-blocks", "1",
                 "--teacher-hidden", "64", "--teacher-blocks", "2",
                 "--pretrain-epochs", "2", "--pretrain-lr", "3e-3",
                 "--lora-rank", "8", "--lora-steps", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "checkpoint\t" in out
    assert (ckpt / "teacher.mosc").exists()
    assert (ckpt / "teacher_metrics.tsv").exists()

    assert main(["distill", *common, "--teacher", str(ckpt),
                 "--checkpoint-dir", str(student_ckpt), "--preset", "S",
                 "--scale", "desk", "--epochs", "1", "--lr-student", "3e-3",
                 "--loss-arm", "full", "--max-gen-len", "8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "test_bleu\t" in out
    assert (student_ckpt / "student.mosc").exists()

    # generate from the first test image and score it end to end
    from scriptkd.data import DatasetManifest, split

    m = split(DatasetManifest.load(manifest, seed=7), seed=7)
    test_record = m.by_split("test")[0]
    assert main(["generate", "--image", str(corpus / test_record.path),
                 "--checkpoint", str(student_ckpt), "--vocab", str(vocab)]) == EXIT_OK
    prediction = capsys.readouterr().out.rstrip("\n")

    cand, ref = tmp_path / "cand.txt", tmp_path / "ref.txt"
    cand.write_text(prediction + "\n", encoding="utf-8")
    ref.write_text(test_record.text + "\n", encoding="utf-8")
    assert main(["eval-bleu", "--candidates", str(cand), "--references",
                 str(ref), "--smoothing"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("bleu\t")

    assert main(["eval-char", "--candidates", str(cand), "--references",
                 str(ref)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("char_accuracy\t")

    elapsed = time.monotonic() - start
    assert elapsed < 1800, f"smoke pipeline took {elapsed:.0f}s"


def test_bench_subcommand(capsys):
    assert main(["bench", "--preset", "S", "--scale", "desk",
                 "--duration", "0.2", "--trials", "3", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "tokens_per_second\t" in out
    rate = float(out.split("tokens_per_second\t")[1].split()[0])
    assert rate > 0
