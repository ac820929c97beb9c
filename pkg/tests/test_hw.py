from pathlib import Path

import pytest

from sparsemesh.hw import (HwConfig, HwConfigError, bandwidth_for,
                           bandwidth_fraction, load_config)

DATA = Path(__file__).parent / "data"


class TestConfig:
    def test_empty_file_gives_paper_defaults(self, tmp_path):
        p = tmp_path / "hw.json"
        p.write_text("")
        cfg = load_config(p)
        assert (cfg.mesh_rows, cfg.mesh_cols) == (4, 4)
        assert cfg.memtile_count == 4
        assert cfg.memtile_total_bytes == 2 * 1024 * 1024
        assert cfg.core_mem_banks == 8
        assert cfg.core_total_bytes == 65536
        assert cfg.core_buffer_banks == 6
        assert cfg.macs_per_cycle == 256
        assert cfg.clock_ghz == 1.0

    def test_default_serialization_pinned(self):
        golden = (DATA / "hw_default.json").read_text()
        assert load_config(None).dumps() == golden

    def test_2x2_has_two_memtiles(self):
        cfg = load_config({"mesh": [2, 2]})
        assert cfg.memtile_count == 2
        assert cfg.memtile_total_bytes == 1024 * 1024

    def test_7x7_override_accepted(self):
        cfg = load_config({"mesh": [7, 7]})
        assert cfg.memtile_count == 7

    def test_explicit_memtile_count_kept(self):
        cfg = load_config({"mesh": [8, 8], "memtile_count": 4})
        assert cfg.memtile_count == 4

    @pytest.mark.parametrize("mesh", [(4, 1), (4, 2), (8, 2)])
    def test_rectangular_meshes_load(self, mesh):
        cfg = load_config({"mesh_rows": mesh[0], "mesh_cols": mesh[1]})
        assert cfg.memtile_count == mesh[1]

    def test_nonpositive_rejected(self):
        with pytest.raises(HwConfigError):
            load_config({"memtile_bytes": 0})
        with pytest.raises(HwConfigError):
            load_config({"ddr_channel_gbps": -1.0})

    def test_unknown_field_rejected(self):
        with pytest.raises(HwConfigError, match="unknown"):
            load_config({"meshes": [4, 4]})


class TestBandwidth:
    def test_write_uses_both_channels(self):
        assert bandwidth_for("WRITE", load_config(None)) == 8.0

    def test_split_mode_loads(self):
        cfg = load_config({"memtile_sharing": "split"})
        assert bandwidth_for("LOAD", cfg) == 8.0
        assert bandwidth_for("LOADW", cfg) == 8.0

    def test_shared_mode_loads(self):
        cfg = load_config(None)
        assert bandwidth_for("LOAD", cfg) == 4.0
        assert bandwidth_for("LOADW", cfg) == 4.0

    def test_ddr_slowdown(self):
        cfg = load_config({"ddr_slowdown": 16})
        assert bandwidth_for("LOAD", cfg) == 0.25
        # fabric links are not slowed
        assert bandwidth_for("LOADFM", cfg) == 4.0

    def test_fabric_kinds(self):
        cfg = load_config(None)
        for kind in ("LOADFM", "LOADWM", "WRITEFM"):
            assert bandwidth_for(kind, cfg) == 4.0

    def test_fraction_agrees_with_float(self):
        cfg = load_config({"ddr_slowdown": 16})
        for kind in ("LOAD", "LOADW", "WRITE", "LOADFM"):
            assert float(bandwidth_fraction(kind, cfg)) == bandwidth_for(kind, cfg)

    def test_comp_has_no_bandwidth(self):
        with pytest.raises(HwConfigError):
            bandwidth_for("COMP", load_config(None))
