import numpy as np
import pytest
import yaml

from mvgcca.cli import (
    ExperimentConfig,
    UsageError,
    export_embedding,
    grid_search,
    main,
    read_embedding,
    run_experiment,
    set_field,
)
from mvgcca.data import Adjacency, MultiviewDataset, normalize_adjacency
from mvgcca.model import embed, load_checkpoint

TINY_TRAIN = {"hidden": 8, "decoder_hidden": 8, "layers": 1, "decoder_layers": 1,
              "epochs": 1, "batch_size": 700, "hops": 1}


def two_clique_toy(n_per=20, seed=0):
    """Noise views over two disjoint cliques; the labels are the cliques."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per
    views = [rng.normal(size=(5, n)) for _ in range(2)]
    W = np.zeros((n, n))
    W[:n_per, :n_per] = 1
    W[n_per:, n_per:] = 1
    np.fill_diagonal(W, 0)
    labels = np.repeat([0, 1], n_per)
    return MultiviewDataset(views, labels=labels, adjacency=normalize_adjacency(Adjacency(W)))


def toy_config(tmp_path, **kw):
    base = dict(dataset="uci7", method="gmcca", task="classify", out=str(tmp_path / "grid"), latent_dim=2)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


class TestConfig:
    def test_yaml_roundtrip_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "exp.yaml"
        cfg_file.write_text(yaml.safe_dump({"method": "mvgcca", "train": {"hidden": 16}, "graph": {"k": 7}}))
        from mvgcca.cli import build_parser, config_from_args

        args = build_parser().parse_args(["--config", str(cfg_file), "--lr", "0.01", "--knn-k", "5"])
        cfg = config_from_args(args)
        assert cfg.method == "mvgcca"
        assert cfg.train.hidden == 16
        assert cfg.train.learning_rate == 0.01
        assert cfg.graph.k == 5

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            ExperimentConfig.from_dict({"methd": "pca"})
        with pytest.raises(UsageError):
            set_field(ExperimentConfig(), "train.nope", 1)

    def test_recommend_requires_twitter(self):
        with pytest.raises(UsageError, match="twitter"):
            ExperimentConfig(task="recommend", dataset="uci7").validate()

    def test_enum_checked_before_loading(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.yaml"
        cfg_file.write_text(yaml.safe_dump({"method": "lda", "data_dir": str(tmp_path / "absent")}))
        assert main(["--config", str(cfg_file)]) == 2
        assert "method must be one of" in capsys.readouterr().err

    def test_cli_recommend_usage_error(self, tmp_path):
        assert main(["--task", "recommend", "--dataset", "uci7", "--data-dir", str(tmp_path)]) == 2

    def test_missing_data_is_load_error(self, tmp_path):
        assert main(["--data-dir", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3

    def test_resolved_ties_latent_size(self):
        cfg = ExperimentConfig(latent_dim=5, seed=3)
        assert cfg.train_config().latent_dim == 5
        assert cfg.resolved()["train"]["seed"] == 3


class TestGrid:
    def test_graph_penalty_selected(self, tmp_path):
        result = grid_search(toy_config(tmp_path), {"gamma": [0.0, 10.0]}, dataset=two_clique_toy())
        assert result.best_config.gamma == 10.0
        accs = [p["metrics"]["accuracy"][0] for p in result.points]
        assert accs[1] == 1.0 and accs[0] < 1.0
        summary = (tmp_path / "grid" / "grid.tsv").read_text()
        assert summary.startswith("# best point: 1")

    def test_tie_keeps_first(self, tmp_path):
        result = grid_search(toy_config(tmp_path), {"gamma": [10.0, 20.0]}, dataset=two_clique_toy())
        assert result.best_index == 0

    def test_failed_point_recorded(self, tmp_path):
        result = grid_search(toy_config(tmp_path, gamma=10.0), {"latent_dim": [500, 2]},
                             dataset=two_clique_toy())
        assert result.points[0]["status"] == "failed"
        assert "latent dimension" in result.points[0]["error"]
        assert result.best_index == 1

    def test_singleton_equals_single_run(self, tmp_path):
        ds = two_clique_toy()
        cfg = toy_config(tmp_path, gamma=10.0)
        result = grid_search(cfg, {"gamma": [10.0]}, dataset=ds, write=False)
        single = run_experiment(cfg, write=False, dataset=ds)
        assert result.best_report.metrics == single.metrics

    def test_empty_grid(self, tmp_path):
        with pytest.raises(UsageError):
            grid_search(toy_config(tmp_path), {}, dataset=two_clique_toy())


class TestUciRuns:
    def test_pca_report_deterministic(self, uci_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["--dataset", "uci7", "--method", "pca", "--data-dir", str(uci_dir),
                         "--out", str(out)]) == 0
            outs.append(out)
        texts = [(o / "report.tsv").read_text() for o in outs]
        assert texts[0].replace(str(outs[0]), "") == texts[1].replace(str(outs[1]), "")
        assert texts[0].startswith("# config: ")
        header = texts[0].splitlines()[1].split("\t")
        assert header == ["method", "dataset", "metric", "mean", "std", "seed"]
        acc = float(texts[0].splitlines()[2].split("\t")[3])
        assert 0.8 < acc < 0.95

    def test_mvgcca_outputs_and_export(self, uci_dir, tmp_path):
        cfg = ExperimentConfig.from_dict({"dataset": "uci7", "method": "mvgcca", "task": "classify",
                                          "data_dir": str(uci_dir), "out": str(tmp_path / "m"),
                                          "train": TINY_TRAIN})
        run_experiment(cfg)
        out = tmp_path / "m"
        for name in ("checkpoint.pt", "epochs.tsv", "report.tsv", "report.txt"):
            assert (out / name).exists()
        path = export_embedding(cfg, out / "checkpoint.pt", out / "emb.tsv")
        ids, labels, Z = read_embedding(path)
        assert Z.shape == (3, 1400) and ids.shape == (1400,)
        assert set(labels) == {1, 2, 3, 4, 7, 8, 9}
        from mvgcca.cli import load_dataset

        model, _ = load_checkpoint(out / "checkpoint.pt")
        np.testing.assert_array_equal(Z, embed(model, load_dataset(cfg)))

        with pytest.raises(UsageError, match="latent_dim"):
            export_embedding(set_field(cfg, "latent_dim", 2), out / "checkpoint.pt", out / "x.tsv")
        with pytest.raises(FileNotFoundError):
            export_embedding(cfg, out / "missing.pt", out / "x.tsv")
        assert main(["export", "--data-dir", str(uci_dir), "--checkpoint", str(out / "missing.pt")]) == 3
