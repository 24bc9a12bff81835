"""Tests for the key = value run-configuration layer."""

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vseg.config import (
    KEY_PARSERS,
    RunConfig,
    format_config,
    format_value,
    load_config,
    loss_class_set,
    parse_config,
)
from vseg.losses import SMOOTH_EPS
from vseg.metrics import default_region_map
from vseg.network import ArchSpec


class TestRoundTrip:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(format_config(cfg)) == cfg

    def test_format_is_stable(self):
        text = format_config(RunConfig())
        assert format_config(parse_config(text)) == text

    def test_empty_text_gives_defaults(self):
        assert parse_config("") == RunConfig()

    def test_non_default_values_round_trip(self):
        cfg = RunConfig(
            class_count=4,
            contracting_features=(2, 2, 4, 4, 4, 8, 8),
            expanding_features=(4, 8, 4, 4, 2, 4),
            skip_mode="none",
            head_count=1,
            init="xavier",
            lr=3e-3,
            tolerance=0.0,
            loss="cross_entropy",
            loss_classes="1,3",
            regions={"bone": (2,), "soft": (1, 3)},
        )
        assert parse_config(format_config(cfg)) == cfg

    def test_every_key_appears_in_output(self):
        text = format_config(RunConfig())
        for key in KEY_PARSERS:
            assert f"{key} = " in text

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=1e-12, max_value=1e6))
    def test_float_values_round_trip_exactly(self, value):
        cfg = RunConfig(lr=value)
        assert parse_config(format_config(cfg)).lr == value

    def test_load_config_reads_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(format_config(RunConfig(seed=42)), encoding="utf-8")
        assert load_config(path).seed == 42


class TestParsing:
    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nseed = 7  # trailing\n\n")
        assert cfg.seed == 7

    def test_tuple_values_allow_spaces(self):
        cfg = parse_config("contracting_features = 2, 2, 4 ,4,4, 8, 8")
        assert cfg.contracting_features == (2, 2, 4, 4, 4, 8, 8)

    def test_unknown_key_rejected_with_line_number(self):
        with pytest.raises(ValueError, match=r"line 2: unknown key 'learning_rate'"):
            parse_config("seed = 1\nlearning_rate = 0.1\n")

    def test_duplicate_key_rejected_with_line_number(self):
        with pytest.raises(ValueError, match=r"line 3: duplicate key 'seed'"):
            parse_config("seed = 1\nlr = 0.001\nseed = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match=r"line 1: expected key = value"):
            parse_config("just some words\n")

    def test_bad_value_names_key_and_line(self):
        with pytest.raises(ValueError, match=r"line 2: bad value for 'max_epochs'"):
            parse_config("seed = 1\nmax_epochs = soon\n")

    def test_empty_region_name_rejected(self):
        with pytest.raises(ValueError, match=r"line 1: empty region name"):
            parse_config("region_ = 1,2\n")

    def test_region_lines_collected(self):
        cfg = parse_config("region_whole = 1,2,3\nregion_core = 1,3\n")
        assert cfg.regions == {"whole": (1, 2, 3), "core": (1, 3)}

    def test_invalid_arch_combination_rejected_at_parse(self):
        with pytest.raises(ValueError):
            parse_config("head_count = 5\n")

    def test_invalid_train_combination_rejected_at_parse(self):
        with pytest.raises(ValueError):
            parse_config("patience = 700\n")  # exceeds default max_epochs

    def test_invalid_adam_value_rejected_at_parse(self):
        with pytest.raises(ValueError):
            parse_config("lr = -1.0\n")


class TestFormatValue:
    def test_floats_use_repr(self):
        assert format_value(5e-05) == "5e-05"
        assert format_value(0.1) == "0.1"

    def test_tuples_comma_joined(self):
        assert format_value((1, 2, 3)) == "1,2,3"

    def test_bools_lowercase(self):
        assert format_value(True) == "true"
        assert format_value(False) == "false"


class TestDerivedConfigs:
    def test_arch_spec_fields_match(self):
        cfg = RunConfig()
        spec = cfg.arch_spec()
        assert isinstance(spec, ArchSpec)
        for fld in dataclasses.fields(ArchSpec):
            assert getattr(spec, fld.name) == getattr(cfg, fld.name)

    def test_train_config_maps_aux_weights(self):
        cfg = RunConfig(aux_weight_half=0.5, aux_weight_quarter=0.25)
        assert cfg.train_config().aux_weights == (0.5, 0.25)

    def test_train_config_foreground_means_default_classes(self):
        assert RunConfig().train_config().loss_classes is None

    def test_train_config_explicit_classes(self):
        cfg = RunConfig(class_count=4, loss_classes="1,3")
        assert cfg.train_config().loss_classes == (1, 3)

    def test_train_config_threads_smooth_eps(self):
        cfg = RunConfig(smooth_eps=1e-5)
        assert cfg.train_config().smooth_eps == 1e-5
        assert RunConfig().train_config().smooth_eps == SMOOTH_EPS

    def test_adam_config_fields(self):
        adam = RunConfig(lr=1e-3, beta1=0.9, beta2=0.999, adam_eps=1e-9).adam_config()
        assert (adam.lr, adam.beta1, adam.beta2, adam.eps) == (1e-3, 0.9, 0.999, 1e-9)

    def test_region_map_defaults_by_class_count(self):
        for count in (2, 5):
            cfg = RunConfig(class_count=count)
            assert cfg.region_map() == default_region_map(count)

    def test_region_map_prefers_explicit_regions(self):
        cfg = RunConfig(regions={"bone": (2,)})
        assert cfg.region_map() == {"bone": (2,)}


class TestLossClassSet:
    def test_foreground_excludes_background(self):
        assert loss_class_set(RunConfig(class_count=4)) == (1, 2, 3)

    def test_all_includes_background(self):
        assert loss_class_set(RunConfig(class_count=4, loss_classes="all")) == (0, 1, 2, 3)

    def test_explicit_codes(self):
        assert loss_class_set(RunConfig(loss_classes="2, 3")) == (2, 3)
