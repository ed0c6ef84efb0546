import pytest

from melssl.macs import (ArchSpec, LayerEntry, arch_preset, load_arch,
                         macs_count, preset_names)


class TestCounting:
    def test_single_linear_definition(self):
        spec = ArchSpec("toy", 100, 40,
                        [LayerEntry("linear", "proj", "all", 1, {"out_dim": 100})])
        report = macs_count(spec)
        assert report.total == 100 * 40 * 100 == 400_000

    def test_conv_stride_divides_rate(self):
        spec = ArchSpec("conv", 16000, 1, [
            LayerEntry("conv1d", "c1", "g", 1, {"out_ch": 8, "kernel": 10, "stride": 5}),
            LayerEntry("conv1d", "c2", "g", 1, {"out_ch": 8, "kernel": 3, "stride": 2}),
        ])
        report = macs_count(spec)
        assert report.rows[0][3] == 3200 * 8 * 1 * 10
        assert report.rows[1][3] == 1600 * 8 * 8 * 3

    def test_grouped_conv(self):
        spec = ArchSpec("g", 50, 16, [
            LayerEntry("conv1d", "pc", "g", 1,
                       {"out_ch": 16, "kernel": 4, "stride": 1, "groups": 4})])
        assert macs_count(spec).total == 50 * 16 * 4 * 4

    def test_attention_formula(self):
        spec = ArchSpec("a", 50, 64, [
            LayerEntry("attention", "att", "g", 1,
                       {"d_model": 64, "heads": 4, "context": 50})])
        assert macs_count(spec).total == 50 * 4 * 64 * 64 + 2 * 50 * 50 * 64

    def test_ffn_formula(self):
        spec = ArchSpec("f", 50, 64, [
            LayerEntry("ffn", "ffn", "g", 1, {"d_model": 64, "hidden": 256})])
        assert macs_count(spec).total == 50 * 2 * 64 * 256

    def test_dim_mismatch_rejected(self):
        spec = ArchSpec("bad", 50, 32, [
            LayerEntry("attention", "att", "g", 1, {"d_model": 64})])
        with pytest.raises(ValueError, match="d_model"):
            macs_count(spec)

    def test_additivity_of_split_specs(self):
        full = arch_preset("hubert-base")
        report = macs_count(full)
        # split: conv front end alone, then the rest starting at 50 frames/s
        conv_layers = [e for e in full.layers if e.group == "conv_frontend"]
        rest_layers = [e for e in full.layers if e.group != "conv_frontend"]
        part1 = macs_count(ArchSpec("p1", 16000, 1, conv_layers))
        part2 = macs_count(ArchSpec("p2", 50, 512, rest_layers))
        assert part1.total + part2.total == report.total


class TestPresets:
    def test_names_exist(self):
        for name in ("melhubert-10ms", "melhubert-20ms", "melhubert-20ms-best",
                     "hubert-base-macs"):
            assert name in preset_names()
            macs_count(arch_preset(name))

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            arch_preset("nope")

    def test_10ms_exceeds_twice_20ms(self):
        # quadratic attention term makes the 10 ms variant > 2x the 20 ms one
        m10 = macs_count(arch_preset("melhubert-10ms")).total
        m20 = macs_count(arch_preset("melhubert-20ms")).total
        assert m10 > 2 * m20

    def test_report_table_renders(self):
        table = macs_count(arch_preset("hubert-base")).table()
        assert "conv_frontend" in table and "TOTAL" in table


class TestArchFile:
    def test_load_roundtrip_counts(self, tmp_path):
        path = tmp_path / "arch.ini"
        path.write_text("""
[input]
rate = 100
dim = 40

[proj]
type = linear
out_dim = 64
group = transformer

[att]
type = attention
d_model = 64
heads = 4
repeat = 2
group = transformer

[ffn]
type = ffn
d_model = 64
hidden = 256
repeat = 2
group = transformer
""")
        report = macs_count(load_arch(str(path)))
        expected = (100 * 40 * 64
                    + 2 * (100 * 4 * 64 * 64 + 2 * 100 * 100 * 64)
                    + 2 * (100 * 2 * 64 * 256))
        assert report.total == expected

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[input]\nrate = 100\ndim = 4\n\n[x]\ntype = linear\n"
                        "out_dim = 8\nbogus = 1\n")
        with pytest.raises(ValueError, match="unknown keys"):
            load_arch(str(path))
