import os

import pytest

from committee_distill.augment import AugmentFlags
from committee_distill.data import ToyParams, in_memory_dataset
from committee_distill.errors import ConfigError, IncompleteCommittee, \
    MissingPrior
from committee_distill.model_zoo import BackboneSpec
from committee_distill.posteval import PostEvalConfig
from committee_distill.prior import (
    PriorTable,
    assign_prior_performance,
    lookup_alpha,
)
from committee_distill.recover import RecoverConfig
from committee_distill.squeeze import SqueezeConfig, pretrain

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
MILD = AugmentFlags(rrc_scale=(0.5, 1.0))


@pytest.fixture(scope="module")
def tiny_committee():
    params = ToyParams(train_per_class=12, test_per_class=6, noise_sigma=0.10,
                       seed=13, reference_ipc=1)
    train, test = in_memory_dataset("toy10", params=params)
    cfg = SqueezeConfig(epochs=6, batch_size=32, seed=0, augmentation=MILD)
    committee = [pretrain(BackboneSpec(a, 10), train, cfg, test_set=test)
                 for a in ("tiny_cnn", "tiny_cnn_narrow")]
    return committee, train, test


class TestAssignPriorPerformance:
    def test_stubbed_pipeline_passes_scores_through(self, tiny_committee):
        committee, train, test = tiny_committee
        scores = iter([64.0, 51.6])

        def stub(teacher, dataset, test_set, ipc, eval_arch, seed,
                 recover_cfg, posteval_cfg):
            return next(scores)

        table = assign_prior_performance(
            committee, train, ipc=1, eval_arch="tiny_cnn", seed=0,
            test_set=test, pipeline_fn=stub)
        assert table.entries == {"tiny_cnn": 64.0, "tiny_cnn_narrow": 51.6}
        assert table.evaluation_arch == "tiny_cnn"
        assert set(table.provenance) == set(table.entries)

    def test_desk_scale_runs_are_deterministic(self, tiny_committee):
        committee, train, test = tiny_committee
        kwargs = dict(
            committee=committee, dataset=train, ipc=1, eval_arch="tiny_cnn",
            seed=3, test_set=test,
            recover_cfg=RecoverConfig(iterations=3, batch_size=10,
                                      augmentation=MILD),
            posteval_cfg=PostEvalConfig(
                epochs=1, augmentation=AugmentFlags(rrc_scale=(0.5, 1.0),
                                                    cutmix=True)))
        a = assign_prior_performance(**kwargs)
        b = assign_prior_performance(**kwargs)
        assert a.entries == b.entries
        assert a.provenance == b.provenance

    def test_empty_committee(self, tiny_committee):
        _, train, test = tiny_committee
        with pytest.raises(IncompleteCommittee):
            assign_prior_performance([], train, ipc=1, eval_arch="tiny_cnn",
                                     seed=0, test_set=test)

    def test_teacher_from_other_dataset_rejected(self, tiny_committee):
        committee, train, test = tiny_committee
        import dataclasses

        foreign = dataclasses.replace(committee[0], dataset_id="elsewhere")
        with pytest.raises(IncompleteCommittee):
            assign_prior_performance([foreign], train, ipc=1,
                                     eval_arch="tiny_cnn", seed=0,
                                     test_set=test)

    def test_nonreference_ipc_guarded(self, tiny_committee):
        committee, train, test = tiny_committee

        def stub(*args, **kwargs):
            return 10.0

        with pytest.raises(ConfigError, match="reference"):
            assign_prior_performance(committee, train, ipc=7,
                                     eval_arch="tiny_cnn", seed=0,
                                     test_set=test, pipeline_fn=stub)
        table = assign_prior_performance(
            committee, train, ipc=7, eval_arch="tiny_cnn", seed=0,
            test_set=test, pipeline_fn=stub, allow_nonreference_ipc=True)
        assert table.reference_ipc == 7


class TestPriorTable:
    def test_paper_scale_fixture_values(self):
        table = PriorTable.load(
            os.path.join(FIXTURES, "cifar100_reference.prior"))
        assert table.dataset_id == "cifar100"
        assert table.reference_ipc == 50
        assert lookup_alpha(table, "resnet18_like") == pytest.approx(64.00)
        assert lookup_alpha(table, "shufflenetv2_like") == pytest.approx(51.62)

    def test_lookup_present(self):
        table = PriorTable(dataset_id="d", reference_ipc=1,
                           entries={"a": 64.0}, evaluation_arch="a")
        assert lookup_alpha(table, "a") == 64.0

    def test_lookup_absent(self):
        table = PriorTable(dataset_id="d", reference_ipc=1,
                           entries={"a": 64.0}, evaluation_arch="a")
        with pytest.raises(MissingPrior):
            lookup_alpha(table, "b")

    def test_round_trip_preserves_values(self, tmp_path):
        table = PriorTable(dataset_id="d", reference_ipc=2,
                           entries={"a": 64.0, "b": 51.62},
                           evaluation_arch="a", provenance={"a": "x", "b": "y"})
        path = tmp_path / "d.prior"
        table.save(path)
        loaded = PriorTable.load(path)
        assert loaded.entries == table.entries
        assert loaded.provenance == table.provenance
        assert loaded.reference_ipc == 2

    def test_alpha_range_validated(self):
        with pytest.raises(ConfigError):
            PriorTable(dataset_id="d", reference_ipc=1,
                       entries={"a": 120.0}, evaluation_arch="a")

    def test_covers(self):
        table = PriorTable(dataset_id="d", reference_ipc=1,
                           entries={"a": 1.0, "b": 2.0}, evaluation_arch="a")
        assert table.covers(["a", "b"])
        assert not table.covers(["a", "c"])
