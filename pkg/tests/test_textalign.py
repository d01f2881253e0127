from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mepois import numcore as nc
from mepois import textalign as ta
from mepois.geodata import haversine_m, offset_deg


def test_single_poi_has_no_neighbors(small_world):
    text = ta.build_prompt(small_world[0], small_world[:1])
    assert text.endswith("Nearby Places:\n")
    assert small_world[0].name in text and small_world[0].address in text


def test_due_north_is_n(small_world):
    a = small_world[0]
    lat, lon = offset_deg(a.lat, a.lon, 500, 0)
    b = replace(small_world[1], lat=lat, lon=lon, name="Northern Spot")
    assert "0.5 km N: Northern Spot" in ta.build_prompt(a, [a, b])


@pytest.mark.parametrize("bearing,expect", [(0, "N"), (22.4, "N"), (22.5, "NE"), (337.5, "N"), (337.4, "NW"),
                                            (90, "E"), (180, "S"), (200, "S"), (270, "W"), (359.99, "N")])
def test_compass_sectors(bearing, expect):
    assert ta.compass_point(bearing) == expect


def test_neighbors_match_brute_force(small_world):
    for poi in small_world[:15]:
        got = [(p.id, round(d, 6)) for p, d in ta.nearest_neighbors(poi, small_world)]
        brute = sorted(((haversine_m(poi.lat, poi.lon, q.lat, q.lon), q.id) for q in small_world if q.id != poi.id))
        assert got == [(pid, round(float(d), 6)) for d, pid in brute[:10]]


def test_prompt_structure_and_determinism(small_world):
    a = ta.build_prompt(small_world[3], small_world)
    assert a == ta.build_prompt(small_world[3], small_world)
    lines = a.splitlines()
    near = lines[lines.index("Nearby Places:") + 1:]
    assert len(near) == 10
    for line in near:
        dist, unit, direction = line.split(":")[0].split()
        assert unit == "km" and direction in ta.COMPASS and len(dist.split(".")[1]) == 1


def test_hash_embedder_properties(small_world):
    emb = ta.HashingEmbedder()
    p = ta.build_prompt(small_world[0], small_world)
    a, b = emb.embed(0, p), emb.embed(0, p)
    assert a.shape == (768,) and np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    nb = ta.nearest_neighbors(small_world[0], small_world)[0][0]
    q = p.replace(nb.name, "Zanzibar Quokka Emporium")
    assert q != p
    cos = float(a @ emb.embed(0, q))
    assert 0.5 < cos < 1.0
    assert np.array_equal(emb.embed_text(""), np.zeros(768))


def test_precomputed_provider(tmp_path, small_world):
    vecs = {p.id: np.full(768, p.id / 1000) for p in small_world[:5]}
    ta.write_text_embeddings(tmp_path / "t.jsonl", vecs)
    prov = ta.PrecomputedEmbedder(tmp_path / "t.jsonl")
    assert prov.dim == 768 and np.array_equal(prov.embed(3, ""), vecs[3])
    with pytest.raises(ta.MissingEmbeddingError, match="7"):
        prov.embed(7, "")
    with pytest.raises(ta.MissingEmbeddingError, match=r"\[5, 6"):
        ta.embed_world(small_world[:7], prov)


def test_dump_prompts(tmp_path, small_world):
    n = ta.dump_prompts(tmp_path / "pr", small_world[:4])
    assert n == 4 and (tmp_path / "pr" / "poi_2.txt").read_text() == ta.build_prompt(small_world[2], small_world[:4])


def test_loss_examples(f64):
    proj = ta.TextProjection(2, 3)
    with torch.no_grad():
        proj.weight.copy_(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    t = torch.tensor([[2.0, 1.0, 5.0]])
    assert abs(float(ta.text_align_loss(torch.tensor([[2.0, 1.0]]), t, proj))) < 1e-12
    assert abs(float(ta.text_align_loss(torch.tensor([[-1.0, 2.0]]), t, proj)) - 1.0) < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_loss_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    proj = ta.TextProjection(4, 6)
    per = 1 - nc.cosine_sim(torch.randn(5, 4, generator=g), proj(torch.randn(5, 6, generator=g)))
    assert float(per.min()) >= -1e-6 and float(per.max()) <= 2 + 1e-6


def test_loss_gradients(f64):
    proj = ta.TextProjection(4, 6)
    z = torch.randn(3, 4, requires_grad=True)
    t = torch.randn(3, 6)
    fn = lambda: ta.text_align_loss(z, t, proj)
    nc.backward(fn())
    assert nc.relative_error(z.grad, nc.numerical_gradient(fn, z)) < 1e-4
    assert nc.relative_error(proj.weight.grad, nc.numerical_gradient(fn, proj.weight)) < 1e-4


def test_toy_alignment_decreases():
    drops = []
    for s in range(5):
        torch.manual_seed(s)
        z = torch.nn.Parameter(torch.randn(4, 8))
        proj = ta.TextProjection(8, 16)
        t = torch.randn(4, 16)
        opt = nc.Adam({"z": z, "w": proj.weight}, lr=0.01)
        losses = []
        for _ in range(200):
            loss = ta.text_align_loss(z, t, proj)
            losses.append(loss.item())
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
        drops.append(losses[-1] < losses[0])
    assert sorted(drops)[2]
