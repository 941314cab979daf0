"""Explanation accounting, report rendering, and the prototype audit."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from protoeeg import explain as ex
from protoeeg import model as m
from protoeeg import training as tr
from protoeeg.dataset import EEGSample
from protoeeg.errors import (ConfigurationError, MissingSampleError,
                             ProvenanceError)

TOY_ARCH = m.BackboneConfig(
    blocks=(m.ConvBlock(4, (29, 17), (11, 10)), m.ConvBlock(8, (10, 3), (1, 1))),
    latent_dim=8)


def toy_windows(n_per_class=6, num_classes=9, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(128) / 128.0
    values, labels = [], []
    for c in range(num_classes):
        tone = np.sin(2 * np.pi * (2.0 + 3.0 * c) * t)[:, None]
        emphasis = np.ones(37)
        emphasis[c * 4:(c + 1) * 4] = 2.5
        for _ in range(n_per_class):
            w = tone * emphasis[None, :] + 0.05 * rng.standard_normal((128, 37))
            values.append(w)
            labels.append(c)
    # round-trip through float32 so stored samples match training arrays bitwise
    return np.asarray(values, dtype=np.float32).astype(np.float64), \
        np.asarray(labels, dtype=np.int64)


@pytest.fixture(scope="module")
def pushed():
    values, labels = toy_windows()
    data = tr.TrainData.of(values, labels)
    net = m.ProtoEEGNet.initialize(config=TOY_ARCH, seed=31, num_classes=9,
                                   per_class=2)
    cfg = tr.TrainConfig(num_train_epochs=4, num_warm_epochs=4,
                         num_secondary_warm_epochs=0, push_start=0,
                         push_epochs=(4,), batch_size=8,
                         train_push_batch_size=10, seed=2)
    tr.run_warm_stage(net, data, cfg)
    records = tr.push_prototypes(net, data, cfg, epoch=4)
    samples = [EEGSample(values=values[i].astype(np.float32),
                         votes=int(labels[i]), sample_id=int(data.train_ids[i]))
               for i in range(len(labels))]
    return net, data, samples, records


class TestExplain:
    def test_requires_push_provenance(self):
        net = m.ProtoEEGNet.initialize(config=TOY_ARCH, seed=1, num_classes=4,
                                       per_class=2)
        sample = EEGSample(values=np.zeros((128, 37), dtype=np.float32) + 0.5,
                           votes=1, sample_id=0)
        with pytest.raises(ProvenanceError, match="push"):
            ex.explain(net, sample)

    def test_push_source_scores_similarity_one(self, pushed):
        net, data, samples, records = pushed
        rec = records[0]
        sample = next(s for s in samples if s.sample_id == rec.source_sample_id)
        result = ex.explain(net, sample, top_k=net.bank.count)
        section = next(s for s in result.sections
                       if s.class_id == rec.prototype_class)
        row = next(r for r in section.rows
                   if (r.prototype_class, r.prototype_index)
                   == (rec.prototype_class, rec.prototype_index))
        assert abs(row.similarity - 1.0) <= 1e-9
        assert row.source_sample_id == sample.sample_id

    def test_completeness_residual_is_zero(self, pushed):
        net, _, samples, _ = pushed
        for sample in samples[:12]:
            result = ex.explain(net, sample, top_k=net.bank.count)
            for section in result.sections:
                assert section.residual == 0.0
                total = sum(r.points for r in section.rows)
                assert abs(total - section.logit) <= 1e-12

    def test_rows_sorted_by_absolute_points(self, pushed):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[3], top_k=net.bank.count)
        for section in result.sections:
            mags = [abs(r.points) for r in section.rows]
            assert mags == sorted(mags, reverse=True)
        top = result.sections[0].rows[0]
        assert abs(top.points) == max(abs(r.points)
                                      for r in result.sections[0].rows)

    def test_points_is_exact_product(self, pushed):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[5], top_k=4)
        for section in result.sections:
            for row in section.rows:
                assert row.points == row.similarity * row.class_connection

    def test_section_ordering(self, pushed):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[7])
        assert result.sections[0].class_id == result.predicted_class
        rest = [s.probability for s in result.sections[1:]]
        assert rest == sorted(rest, reverse=True)
        assert len(result.sections) == net.bank.num_classes

    def test_top_k_limits_rows(self, pushed):
        net, _, samples, _ = pushed
        assert all(len(s.rows) == 2
                   for s in ex.explain(net, samples[0], top_k=2).sections)
        assert all(len(s.rows) == net.bank.count
                   for s in ex.explain(net, samples[0], top_k=99).sections)
        with pytest.raises(ConfigurationError):
            ex.explain(net, samples[0], top_k=0)

    def test_sources_belong_to_prototype_class(self, pushed):
        net, data, samples, _ = pushed
        label_of = {int(i): int(l) for i, l in zip(data.train_ids,
                                                   data.train_labels)}
        result = ex.explain(net, samples[9], top_k=net.bank.count)
        for section in result.sections:
            for row in section.rows:
                assert label_of[row.source_sample_id] == row.prototype_class

    def test_json_roundtrip(self, pushed):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[2])
        blob = json.dumps(result.to_dict(), sort_keys=True)
        parsed = json.loads(blob)
        assert parsed["sample_id"] == samples[2].sample_id
        assert parsed["predicted_class"] == result.predicted_class
        assert len(parsed["probabilities"]) == 9
        assert abs(parsed["binary"]["p_pos"] + parsed["binary"]["p_neg"] - 1.0) \
            <= 1e-12

    def test_binary_score_needs_nine_classes(self):
        values, labels = toy_windows(n_per_class=4, num_classes=4)
        data = tr.TrainData.of(values, labels)
        net = m.ProtoEEGNet.initialize(config=TOY_ARCH, seed=2, num_classes=4,
                                       per_class=2)
        cfg = tr.TrainConfig(num_train_epochs=1, num_warm_epochs=1,
                             num_secondary_warm_epochs=0, push_start=0,
                             push_epochs=(1,), batch_size=8,
                             train_push_batch_size=8, seed=0)
        tr.push_prototypes(net, data, cfg, epoch=1)
        sample = EEGSample(values=values[0].astype(np.float32), votes=0,
                           sample_id=0)
        result = ex.explain(net, sample)
        assert result.binary is None
        assert result.to_dict()["binary"] is None


class TestRenderReport:
    def test_files_and_names(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[4])
        paths = ex.render_report(result, samples, tmp_path)
        sid = samples[4].sample_id
        for kind in ("json", "svg", "txt"):
            assert paths[kind].name == f"explain_{sid}.{kind}"
            assert paths[kind].exists()

    def test_svg_is_well_formed(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[4])
        paths = ex.render_report(result, samples, tmp_path)
        root = ET.fromstring(paths["svg"].read_text())
        assert root.tag.endswith("svg")

    def test_rendered_numbers_match_explanation(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[6])
        paths = ex.render_report(result, samples, tmp_path)
        svg = paths["svg"].read_text()
        txt = paths["txt"].read_text()
        for row in result.sections[0].rows:
            for value in (row.similarity, row.class_connection, row.points):
                token = format(value, ".12g")
                assert token in svg
                assert token in txt
        for section in result.sections:  # text table carries every section
            assert format(section.logit, ".12g") in txt

    def test_deterministic_bytes(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[1])
        first = ex.render_report(result, samples, tmp_path / "a")
        second = ex.render_report(result, samples, tmp_path / "b")
        for kind in ("json", "svg", "txt"):
            assert first[kind].read_bytes() == second[kind].read_bytes()

    def test_missing_source_rejected(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[4])
        needed = {r.source_sample_id for r in result.sections[0].rows}
        pruned = [s for s in samples if s.sample_id not in needed]
        with pytest.raises(MissingSampleError):
            ex.render_report(result, pruned, tmp_path)

    def test_missing_query_rejected(self, pushed, tmp_path):
        net, _, samples, _ = pushed
        result = ex.explain(net, samples[4])
        pruned = [s for s in samples if s.sample_id != samples[4].sample_id]
        with pytest.raises(MissingSampleError,
                           match=str(samples[4].sample_id)):
            ex.render_report(result, pruned, tmp_path)


class TestGlobalPrototypeReport:
    def test_requires_push(self, pushed):
        _, data, _, _ = pushed
        fresh = m.ProtoEEGNet.initialize(config=TOY_ARCH, seed=5,
                                         num_classes=4, per_class=2)
        with pytest.raises(ProvenanceError):
            ex.global_prototype_report(fresh, data)

    def test_rows_and_push_similarities(self, pushed):
        net, data, _, _ = pushed
        report = ex.global_prototype_report(net, data)
        assert len(report["prototypes"]) == net.bank.count
        for row in report["prototypes"]:
            assert abs(row["max_on_class"] - 1.0) <= 1e-9  # just pushed
            assert row["mean_on_class"] <= row["max_on_class"]
            assert row["source_sample_id"] >= 0

    def test_no_flags_on_separable_toy(self, pushed):
        net, data, _, _ = pushed
        report = ex.global_prototype_report(net, data)
        assert report["flagged"] == []
        assert all(not row["flagged"] for row in report["prototypes"])
