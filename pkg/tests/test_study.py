import json

import pytest

from dasgil.config import RunConfig, apply_overrides, load_run_config, toy_run_config
from dasgil.errors import InvalidConfig
from dasgil.evalbench import read_report
from dasgil.netcore import init_params
from dasgil.study import (
    ARCH_VARIANTS,
    RETRIEVAL_VARIANTS,
    apply_variant,
    domain_probe_accuracy,
    evaluate_localization,
    manifest_digest,
    probe_split,
    run_ablation,
    training_key,
)
from dasgil.trainer import train


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = toy_run_config(3)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        back = load_run_config(tmp_path / "c.json")
        assert back.to_dict() == cfg.to_dict()

    def test_overrides_parse_json(self):
        doc = apply_overrides({"train": {"epochs": 5}}, ["train.epochs=2", "train.use_gan=false", "paths.out=x/y"])
        assert doc == {"train": {"epochs": 2, "use_gan": False}, "paths": {"out": "x/y"}}

    def test_bad_override(self):
        with pytest.raises(InvalidConfig):
            apply_overrides({}, ["no-equals"])

    def test_unknown_key(self):
        with pytest.raises(InvalidConfig):
            load_run_config(None, ["train.nonsense=1"])

    def test_class_count_consistency(self):
        cfg = toy_run_config()
        cfg.toy.class_count = 4
        with pytest.raises(InvalidConfig):
            cfg.validate()

    def test_scaled_thresholds(self):
        e = toy_run_config().eval
        assert e.radius_m == pytest.approx(2.5)
        assert e.d_thresholds[0] == pytest.approx(1.5) and e.d_thresholds[-1] == pytest.approx(5.0)


class TestVariants:
    def test_every_table_variant_is_valid(self, toy_cfg):
        for v in ARCH_VARIANTS + RETRIEVAL_VARIANTS:
            assert isinstance(apply_variant(toy_cfg, v), RunConfig)

    def test_unknown_variant(self, toy_cfg):
        with pytest.raises(InvalidConfig):
            apply_variant(toy_cfg, "bogus")

    def test_base_is_not_mutated(self, toy_cfg):
        before = toy_cfg.to_dict()
        apply_variant(toy_cfg, "no-gan")
        apply_variant(toy_cfg, "single-fd")
        assert toy_cfg.to_dict() == before

    def test_retrieval_variants_share_training(self, toy_cfg):
        keys = {training_key(apply_variant(toy_cfg, v)) for v in ("single-layer-retrieval", "multi-layer-retrieval")}
        assert len(keys) == 1

    @pytest.mark.parametrize("variant,zeroed,live", [
        ("full", [], ["L_dis", "L_gen", "L_T", "L_D", "L_S"]),
        ("no-gan", ["L_dis", "L_gen"], ["L_T", "L_D", "L_S"]),
        ("depth-only", ["L_S"], ["L_dis", "L_gen", "L_T", "L_D"]),
        ("seg-only", ["L_D"], ["L_dis", "L_gen", "L_T", "L_S"]),
    ])
    def test_variant_zeroes_exactly_its_columns(self, small_data, toy_cfg, variant, zeroed, live):
        cfg = apply_variant(toy_cfg, variant)
        cfg.train.max_steps = 1
        _, logs = train(small_data, cfg.net, cfg.train)
        row = logs[0].to_json()
        assert all(row[k] == 0.0 for k in zeroed)
        assert all(row[k] > 0.0 for k in live)

    def test_structural_variants(self, toy_cfg):
        assert apply_variant(toy_cfg, "single-fd").net.discriminator_layers == [4]
        assert apply_variant(toy_cfg, "multi-cd").net.discriminator_kind == "cascade"
        assert apply_variant(toy_cfg, "single-triplet").net.triplet_layers == [4]
        assert apply_variant(toy_cfg, "single-layer-retrieval").net.retrieval_layers == [4]


class TestEvaluation:
    def test_report_from_untrained_model(self, small_data, toy_cfg):
        params = init_params(toy_cfg.net, 0)
        rep = evaluate_localization(params, small_data, toy_cfg.eval)
        assert rep.meta["queries"] == len(small_data.real())
        assert rep.meta["database"] == len(small_data.subset(environment="clone").records)
        assert rep.meta["dataset_digest"] == manifest_digest(small_data)
        rep.validate()

    def test_probe_split_is_balanced_and_disjoint(self, toy_data):
        split = probe_split(toy_data)
        tr, te = split["train"], split["test"]
        assert tr[1].sum() * 2 == len(tr[1]) and te[1].sum() * 2 == len(te[1])
        by = toy_data.by_id
        assert not {by[r.id].sequence for r in tr[0]} & {by[r.id].sequence for r in te[0]}

    def test_probe_separates_raw_domains(self, small_data, toy_cfg):
        # at initialization the feature statistics still carry the photometric shift
        acc = domain_probe_accuracy(init_params(toy_cfg.net, 0), small_data, steps=100)
        assert 0.0 <= acc <= 1.0 and acc >= 0.9


def test_ablation_harness_pair(small_data, toy_cfg, tmp_path):
    cfg = toy_cfg.copy()
    cfg.train.max_steps = 2
    reports = run_ablation(cfg, small_data, ["no-gan", "single-fd"], tmp_path)
    assert set(reports) == {"no-gan", "single-fd"}
    digests = {read_report(tmp_path / v / "report.json").meta["dataset_digest"] for v in reports}
    assert len(digests) == 1
    assert (tmp_path / "comparison.md").read_text().count("\n") == 4
