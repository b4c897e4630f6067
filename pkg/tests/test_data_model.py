import numpy as np
import pytest
import torch

from cdrdesign.complex_model import encode_sequence
from cdrdesign.data import PLM_DIM, PlmError, collate, load_plm, make_example, plm_stub
from cdrdesign.model import DESK, CoDesignModel, ModelConfig
from cdrdesign.trainer import prepare


def test_plm_stub_shape_and_determinism(small_set):
    cx = small_set[0][0]
    a, b = plm_stub(cx), plm_stub(cx)
    assert a.shape == (len(cx.heavy), PLM_DIM) and np.array_equal(a, b)


def test_plm_stub_blind_to_cdr_identity(small_set):
    cx = small_set[0][0]
    s, e = cx.cdr_spans["H3"]
    mutated = cx.with_heavy(cx.heavy.seq[:s] + "W" * (e - s) + cx.heavy.seq[e:])
    assert np.array_equal(plm_stub(cx), plm_stub(mutated))


def test_plm_sidecar_loaded_and_validated(tmp_path, small_set):
    cx = small_set[0][0]
    mat = np.random.default_rng(0).normal(size=(len(cx.heavy), PLM_DIM))
    np.save(tmp_path / f"{cx.id}.npy", mat)
    got, stub = load_plm(cx, tmp_path)
    assert not stub and np.array_equal(got, mat)
    np.save(tmp_path / f"{cx.id}.npy", mat[:, :10])
    with pytest.raises(PlmError, match="shape"):
        load_plm(cx, tmp_path)
    assert load_plm(cx, tmp_path / "missing")[1]


def test_collate_offsets_and_targets(small_set):
    cx = small_set[0][:3]
    ex = [make_example(c) for c in cx]
    b = collate(ex)
    sizes = [e.graph.n_nodes for e in ex]
    assert b.n_nodes == sum(sizes) and b.n_items == 3
    assert torch.equal(b.cdr_target, torch.as_tensor(np.concatenate([encode_sequence(c.cdr_seq) for c in cx])))
    # second item's CDR nodes are shifted by the size of the first graph
    first = len(cx[0].cdr_seq)
    assert b.cdr_nodes[first].item() == sizes[0] + ex[1].graph.cdr_nodes[0]
    assert b.edge_index.max().item() < b.n_nodes
    assert len(set(b.cdr_segment.tolist())) == 3
    assert [sl.stop - sl.start for sl in b.cdr_slices()] == [len(c.cdr_seq) for c in cx]
    assert b.plm.shape == (len(b.cdr_nodes), PLM_DIM)


def test_collate_empty_rejected():
    with pytest.raises(ValueError):
        collate([])


def test_batch_dtype_cast(small_set):
    b = collate([make_example(small_set[0][0])]).to(torch.float64)
    assert b.node_coords.dtype == torch.float64 and b.edge_index.dtype == torch.int64


def test_model_config_validation_and_widths():
    assert ModelConfig().fused_width == 768
    assert ModelConfig(use_plm=False).fused_width == 512
    with pytest.raises(ValueError):
        ModelConfig(heads=3)
    assert ModelConfig.replace(DESK, n_components=1).n_components == 1


@pytest.fixture(scope="module")
def desk_out(small_set):
    torch.manual_seed(0)
    model = CoDesignModel(DESK).eval()
    batch = collate(prepare(small_set[0][:4], DESK))
    with torch.no_grad():
        return model, batch, model(batch)


def test_forward_shapes(desk_out):
    model, batch, out = desk_out
    L = len(batch.cdr_nodes)
    assert out.pred.component_logits.shape == (4, L, 20)
    assert out.cdr_atoms.shape == (L, 4, 3)
    assert out.antigen_emb.shape == (4, DESK.cls_dim)


def test_cross_attention_stays_within_item(desk_out):
    _, batch, out = desk_out
    cross = batch.cdr_item[:, None] != batch.epitope_item[None, :]
    assert torch.all(out.attention[:, cross] == 0)
    assert torch.allclose(out.attention.sum(-1), torch.ones_like(out.attention.sum(-1)))


def test_batching_does_not_mix_items(small_set):
    torch.manual_seed(0)
    model = CoDesignModel(DESK).double().eval()
    ex = prepare(small_set[0][:3], DESK)
    with torch.no_grad():
        joint = model(collate(ex, torch.float64))
        alone = model(collate(ex[1:2], torch.float64))
    sl = collate(ex).cdr_slices()[1]
    assert torch.allclose(joint.pred.component_logits[:, sl], alone.pred.component_logits, atol=1e-10)
    assert torch.allclose(joint.cdr_atoms[sl], alone.cdr_atoms, atol=1e-10)


def test_missing_plm_rejected(small_set):
    model = CoDesignModel(DESK)
    batch = collate(prepare(small_set[0][:1], DESK.replace(use_plm=False)))
    with pytest.raises(ValueError, match="language-model"):
        model(batch)


def test_ablated_components_are_structural():
    m = CoDesignModel(DESK.replace(use_plm=False, hyperbolic=False))
    assert m.plm_proj is None and type(m.attend).__name__ == "EuclideanCrossAttention"
    assert m.head.d_in == 2 * DESK.d_hidden
