import numpy as np
import pytest

from gradlab import tensor as T
from gradlab.harness import (DatasetConfig, DatasetSlice, PrivateBatch,
                             Scenario, TemplateDataset, batch_from_indices,
                             expose_gradients, load_scenario, sample_batch,
                             save_scenario)
from gradlab.models import VictimSpec, make_victim
from gradlab.tensor import Tensor, backward


def test_dataset_reproducible_and_in_range():
    ds = TemplateDataset(DatasetConfig(seed=3))
    a, b = ds.image(7), ds.image(7)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.shape == (1, 16, 16)


def test_dataset_all_classes_present():
    ds = TemplateDataset(DatasetConfig(size=50, seed=0))
    assert set(ds.label(i) for i in range(50)) == set(range(10))


def test_rgb_dataset_shape():
    ds = TemplateDataset(DatasetConfig(channels=3, seed=1))
    assert ds.image(0).shape == (3, 16, 16)
    assert ds.channel_means().shape == (3,)


def test_batch_immutable():
    ds = TemplateDataset(DatasetConfig(seed=0))
    batch = batch_from_indices(ds, [0, 1])
    with pytest.raises(ValueError):
        batch.images[0, 0, 0, 0] = 1.0


def test_sample_batch_deterministic():
    ds = TemplateDataset(DatasetConfig(seed=0))
    b1, idx1 = sample_batch(ds, 4, np.random.default_rng(5))
    b2, idx2 = sample_batch(ds, 4, np.random.default_rng(5))
    assert idx1 == idx2
    assert np.array_equal(b1.images, b2.images)


def test_sample_batch_single():
    ds = TemplateDataset(DatasetConfig(seed=0))
    batch, idx = sample_batch(ds, 1, np.random.default_rng(0))
    assert len(idx) == 1 and batch.images.shape[0] == 1


def test_sample_batch_overflow_needs_wraparound():
    ds = TemplateDataset(DatasetConfig(size=20, seed=0))
    with pytest.raises(ValueError, match="wraparound"):
        # start can reach 9 and the increment 1, so 30 samples always overflow
        sample_batch(ds, 30, np.random.default_rng(1))
    batch, _ = sample_batch(ds, 30, np.random.default_rng(1), wraparound=True)
    assert batch.images.shape[0] == 30


def test_duplicates_occur_naturally():
    # birthday effect: at batch 4 over 10 classes a duplicate-label batch
    # appears well within 1000 samples
    ds = TemplateDataset(DatasetConfig(seed=2))
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(1000):
        batch, _ = sample_batch(ds, 4, rng, wraparound=True)
        if len(set(batch.labels)) < 4:
            hits += 1
    assert hits >= 1


def test_capture_matches_attacker_side_recomputation():
    # closed loop: gradients recomputed attacker-side from the ground truth
    # coincide (cosine similarity 1)
    ds = TemplateDataset(DatasetConfig(seed=4))
    net = make_victim(VictimSpec(), seed=9)
    batch = batch_from_indices(ds, [3, 17])
    cap = expose_gradients(net, batch)
    loss = T.cross_entropy(net.forward(Tensor(batch.images)), np.array(batch.labels))
    grads = backward(loss, net.param_list())
    for name, p in net.named_params():
        assert np.array_equal(cap.grads[name], grads[p].data)


def test_capture_exposes_no_private_fields():
    ds = TemplateDataset(DatasetConfig(seed=4))
    net = make_victim(VictimSpec(), seed=9)
    batch = batch_from_indices(ds, [5])
    cap = expose_gradients(net, batch)
    assert set(vars(cap)) == {"grads", "fc_grad", "batch_size_hint"}
    assert cap.fc_grad.shape == (16, 10)
    assert cap.batch_size_hint == 1


def test_zero_weight_fc_bias_gradient_pattern():
    # zero weights give zero logits: the fc bias gradient is the mean of
    # softmax(0) - onehot = 1/N - empirical class frequency
    ds = TemplateDataset(DatasetConfig(seed=1))
    net = make_victim(VictimSpec(), seed=0)
    for p in net.param_list():
        p.data[...] = 0.0
    batch = batch_from_indices(ds, [0, 1, 2, 3])
    cap = expose_gradients(net, batch)
    freq = np.zeros(10)
    for lbl in batch.labels:
        freq[lbl] += 1 / len(batch.labels)
    assert np.allclose(cap.grads["fc.b"], 0.1 - freq, atol=1e-12)


def test_duplicating_batch_leaves_mean_gradient_unchanged():
    ds = TemplateDataset(DatasetConfig(seed=6))
    net = make_victim(VictimSpec(), seed=2)
    batch = batch_from_indices(ds, [4, 9])
    doubled = batch_from_indices(ds, [4, 9, 4, 9])
    g1 = expose_gradients(net, batch)
    g2 = expose_gradients(net, doubled)
    for name in g1.grads:
        assert np.allclose(g1.grads[name], g2.grads[name], atol=1e-12)


def test_label_out_of_range_rejected():
    ds = TemplateDataset(DatasetConfig(seed=0))
    net = make_victim(VictimSpec(num_classes=5), seed=0)
    batch = PrivateBatch(images=np.asarray(ds.image(0))[None], labels=(7,))
    with pytest.raises(ValueError, match="out of range"):
        expose_gradients(net, batch)


def test_scenario_snapshot_roundtrip(tmp_path):
    scenario = Scenario(dataset=DatasetConfig(seed=12), victim=VictimSpec(),
                        victim_seed=4, indices=(3, 14, 15))
    path = tmp_path / "scenario.json"
    save_scenario(path, scenario)
    loaded = load_scenario(path)
    assert loaded == scenario
    ds, net, batch = loaded.build()
    ds2, net2, batch2 = scenario.build()
    assert np.array_equal(batch.images, batch2.images)
    for name in net.params:
        assert np.array_equal(net.params[name].data, net2.params[name].data)


def test_dataset_slice_view():
    ds = TemplateDataset(DatasetConfig(size=40, seed=0))
    sl = DatasetSlice(ds, 20, 40)
    assert len(sl) == 20
    assert sl.label(0) == ds.label(20)
    assert np.array_equal(sl.image(3), ds.image(23))


def test_image_dir_dataset_roundtrip(tmp_path):
    from gradlab.harness import ImageDirDataset
    from gradlab.imaging import write_image

    ds = TemplateDataset(DatasetConfig(size=6, seed=0))
    for i in range(6):
        write_image(tmp_path / f"label{ds.label(i)}_{i:03d}.pgm", ds.image(i))
    loaded = ImageDirDataset(tmp_path)
    assert len(loaded) == 6
    assert loaded.image(0).shape == (1, 16, 16)
    assert sorted(loaded.label(i) for i in range(6)) == sorted(ds.label(i) for i in range(6))
