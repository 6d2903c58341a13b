import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mvot.container import serialize_helper
from mvot.embedding import TUPLE_HASH_TAG, cosine_similarity
from mvot.security import template_rank
from mvot.sources import (ChaffSource, ChannelSet, CosineDist, PopulationSpec, sample_population,
                          write_embeddings)
from mvot.vault import (EnrollError, HelperData, ParamsError, ProtocolParams, Vault,
                        VerifyError, enroll, enroll_traced, keygen, min_chaff, obfuscate,
                        recommit, revoke_and_reenroll, top_indices, verify)


@pytest.fixture(scope="module")
def hard_population():
    # genuine band reaching down into the chaff cloud, so decisions vary with tr and k
    spec = PopulationSpec(num_identities=30, dim=64, rng_seed=4,
                          genuine_cos=CosineDist(0.3, 0.15, 0.05, 1.0),
                          imposter_cos=CosineDist(0.0, 0.0, 0.0, 0.0))
    return sample_population(spec)


@pytest.fixture(scope="module")
def default_helper(default_population):
    params = ProtocolParams(gamma=54)
    rng = np.random.default_rng(99)
    return enroll_traced(default_population.template(2), default_population.chaff_source(),
                         params, rng)


def _mixed_queries(pop, rng, count):
    out = []
    for j in range(count):
        kind = j % 3
        if kind == 0:
            out.append(pop.genuine_query(0, rng))
        elif kind == 1:
            out.append(pop.imposter_query(0, rng))
        else:
            out.append(pop.unrelated_query(rng))
    return out


# --- keygen ----------------------------------------------------------------

def test_keygen_default_setting():
    p = keygen(54, n=5, k=5, m=2000)
    assert p.m == 2000 and p.n == 5 and p.k == 5
    assert 5 * math.log2(2000) >= 54


def test_keygen_minimal_2_pow_10():
    assert keygen(10, n=1, k=1).m == 1024


def test_keygen_rejects_weak_m():
    with pytest.raises(ParamsError, match="11586"):
        keygen(54, n=5, k=4, m=2000)
    assert keygen(54, n=5, k=4, max_m=10**5).m == 11586
    assert math.ceil(2**13.5) == 11586


def test_keygen_max_m():
    with pytest.raises(ParamsError, match="max_m"):
        keygen(54, n=5, k=1, max_m=10**6)


@pytest.mark.parametrize("gamma,k", [(0, 5), (54, 0), (54, 6)])
def test_keygen_rejects_bad_inputs(gamma, k):
    with pytest.raises(ParamsError):
        keygen(gamma, n=5, k=k)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 120), st.integers(1, 8))
def test_min_chaff_is_minimal(gamma, k):
    m = min_chaff(gamma, k)
    assert m**k >= 2**gamma
    assert m == 2 or (m - 1) ** k < 2**gamma


def test_params_validation():
    with pytest.raises(ParamsError):
        ProtocolParams(gamma=54, tr=0)
    with pytest.raises(ParamsError):
        ProtocolParams(gamma=10, m=5, tr=7)
    with pytest.raises(ParamsError, match="budget"):
        ProtocolParams(gamma=54, tr=20)
    with pytest.raises(ParamsError):
        ProtocolParams(gamma=54, scalar_range=(2.0, 0.5))
    with pytest.raises(ParamsError, match="unknown"):
        ProtocolParams.from_dict({"gamma": 54, "colour": 1})
    p = ProtocolParams(gamma=40, m=4000, k=4)
    assert ProtocolParams.from_dict(p.to_dict()) == p


# --- enroll ----------------------------------------------------------------

def test_enroll_default_shape(default_helper):
    helper, positions = default_helper
    assert len(helper.vaults) == 5
    assert all(v.entries.shape == (2001, 512) for v in helper.vaults)
    assert all(v.entries.dtype == np.dtype("<f4") for v in helper.vaults)
    assert list(helper.commitments) == [(0, 1, 2, 3, 4)]
    assert len(helper.salt) == 16
    assert all(0 <= p <= 2000 for p in positions)


def test_enroll_k4_has_five_commitments(small_population):
    params = ProtocolParams(gamma=10, n=5, m=50, k=4, dim=64)
    helper = enroll(small_population.template(0), small_population.chaff_source(), params,
                    np.random.default_rng(0))
    assert sorted(helper.commitments) == [s for s in params.subsets]
    assert len(helper.commitments) == 5


def test_commitments_match_reference_hash(small_population, small_params):
    helper, positions = enroll_traced(small_population.template(1),
                                      small_population.chaff_source(), small_params,
                                      np.random.default_rng(3))
    for subset, digest in helper.commitments.items():
        msg = TUPLE_HASH_TAG + helper.salt
        for i in subset:
            msg += i.to_bytes(4, "little") + helper.vaults[i].entries[positions[i]].tobytes()
        assert hashlib.sha256(msg).digest() == digest


def test_enroll_twice_differs_but_both_verify(default_population):
    params = ProtocolParams(gamma=54)
    t = default_population.template(4)
    src = default_population.chaff_source()
    (h1, p1), (h2, p2) = (enroll_traced(t, src, params, np.random.default_rng(s)) for s in (1, 2))
    assert h1.salt != h2.salt
    assert p1 != p2
    assert set(h1.commitments.values()).isdisjoint(h2.commitments.values())
    assert verify(h1, t, tr=1).accepted and verify(h2, t, tr=1).accepted


def test_enroll_errors(small_population, small_params, tmp_path, rng):
    src = small_population.chaff_source()
    with pytest.raises(EnrollError):
        enroll(ChannelSet.of(small_population.latents[0][:4]), src, small_params, rng)
    with pytest.raises(EnrollError):
        enroll(ChannelSet.of(rng.normal(size=(5, 32))), src, small_params, rng)
    path = tmp_path / "chaff.csv"
    write_embeddings([(f"c{j}", ch, rng.normal(size=64)) for ch in range(5) for j in range(40)],
                     path)
    with pytest.raises(EnrollError, match="shortage"):
        enroll(small_population.template(0), ChaffSource.from_file(path, 64), small_params, rng)


def test_enroll_with_file_chaff(small_population, small_params, tmp_path, rng):
    path = tmp_path / "chaff.csv"
    write_embeddings([(f"c{j}", ch, rng.normal(size=64)) for ch in range(5) for j in range(60)],
                     path)
    helper = enroll(small_population.template(0), ChaffSource.from_file(path, 64), small_params,
                    rng)
    assert verify(helper, small_population.template(0), tr=1).accepted


# --- obfuscation -----------------------------------------------------------

def test_obfuscation_cosine_bound(rng):
    params = ProtocolParams(gamma=10, m=50, dim=512)
    t = rng.normal(size=(2000, 512))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    q = rng.normal(size=(2000, 512))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # include queries close to the template too
    q[:1000] = 0.9 * t[:1000] + 0.1 * q[:1000]
    ob = obfuscate(t, params, rng)
    delta = params.noise_delta
    for i in range(len(t)):
        d = cosine_similarity(q[i], ob[i]) - cosine_similarity(q[i], t[i])
        assert -2 * delta <= d <= 2 * delta


def test_obfuscation_scale_range(rng):
    params = ProtocolParams(gamma=10, m=50, dim=64)
    t = rng.normal(size=(5000, 64))
    ratio = np.linalg.norm(obfuscate(t, params, rng), axis=1) / np.linalg.norm(t, axis=1)
    assert ratio.min() >= 0.5 * (1 - 0.05) - 1e-6
    assert ratio.max() <= 2.0 * (1 + 0.05) + 1e-6
    assert ratio.min() < 0.6 and ratio.max() > 1.9


def test_obfuscation_fresh_per_entry(rng):
    params = ProtocolParams(gamma=10, m=50, dim=16)
    row = rng.normal(size=16)
    out = obfuscate(np.stack([row, row]), params, rng)
    assert not np.array_equal(out[0], out[1])


# --- verify ----------------------------------------------------------------

def test_self_match_tr1(default_helper, default_population):
    helper, _ = default_helper
    res = verify(helper, default_population.template(2), tr=1)
    assert res.accepted
    assert res.matched_subset == (0, 1, 2, 3, 4)
    assert res.matched_ranks == (0, 0, 0, 0, 0)
    assert res.hash_count == 1


def test_rejecting_query_hashes_exactly_tr_pow_k(default_helper, default_population):
    helper, _ = default_helper
    rng = np.random.default_rng(8)
    for tr, expected in [(1, 1), (2, 32), (3, 243)]:
        res = verify(helper, default_population.unrelated_query(rng), tr=tr)
        assert not res.accepted
        assert res.hash_count == expected


def test_rejecting_query_k4_count(small_population):
    params = ProtocolParams(gamma=10, n=5, m=50, k=4, dim=64)
    helper = enroll(small_population.template(0), small_population.chaff_source(), params,
                    np.random.default_rng(1))
    res = verify(helper, small_population.unrelated_query(np.random.default_rng(2)), tr=2)
    assert not res.accepted and res.hash_count == 5 * 2**4


def test_genuine_query_above_all_chaff_accepts(default_population):
    params = ProtocolParams(gamma=54)
    pop = default_population
    rng = np.random.default_rng(17)
    helper, positions = enroll_traced(pop.template(7), pop.chaff_source(), params, rng)
    for _ in range(10):
        q = pop.genuine_query(7, rng)
        ranks = template_rank(helper, positions, q)
        assert sum(r == 0 for r in ranks) >= params.k
        assert verify(helper, q, tr=1).accepted


def test_decision_matches_rank_oracle(hard_population):
    # accept at tr  <=>  some k-subset of vaults has the template within the top tr
    pop = hard_population
    rng = np.random.default_rng(5)
    for k in (5, 4, 3):
        params = ProtocolParams(gamma=10, n=5, m=50, k=k, dim=64)
        helper, positions = enroll_traced(pop.template(0), pop.chaff_source(), params, rng)
        for q in _mixed_queries(pop, rng, 150):
            ranks = template_rank(helper, positions, q)
            for tr in (1, 2, 3, 5):
                res = verify(helper, q, tr=tr)
                assert res.accepted == (sum(r < tr for r in ranks) >= k)
                if res.accepted:
                    for vi, rk in zip(res.matched_subset, res.matched_ranks):
                        assert ranks[vi] == rk


def test_verify_errors(default_helper, default_population):
    helper, _ = default_helper
    t = default_population.template(2)
    for tr in (0, 2002):
        with pytest.raises(VerifyError):
            verify(helper, t, tr=tr)
    with pytest.raises(VerifyError, match="budget"):
        verify(helper, t, tr=20)
    with pytest.raises(VerifyError):
        verify(helper, ChannelSet.of(default_population.latents[0][:3]), tr=1)


def test_completeness_small(small_population, small_params):
    rng = np.random.default_rng(21)
    for j in range(100):
        t = small_population.template(j % 20)
        helper = enroll(t, small_population.chaff_source(rng_seed=j), small_params, rng)
        assert verify(helper, t, tr=1).accepted


def test_monotone_in_tr(hard_population):
    pop = hard_population
    rng = np.random.default_rng(6)
    params = ProtocolParams(gamma=10, n=5, m=50, k=4, dim=64)
    helper = enroll(pop.template(0), pop.chaff_source(), params, rng)
    totals = np.zeros(5, dtype=int)
    for q in _mixed_queries(pop, rng, 1000):
        acc = [verify(helper, q, tr=tr).accepted for tr in range(1, 6)]
        assert all(a <= b for a, b in zip(acc, acc[1:]))
        totals += acc
    # the sweep is informative: decisions actually change with tr
    assert totals[0] < totals[-1]


def test_monotone_in_k(hard_population):
    pop = hard_population
    rng = np.random.default_rng(7)
    params = ProtocolParams(gamma=5, n=5, m=50, k=5, dim=64, tr=2)
    base, positions = enroll_traced(pop.template(1), pop.chaff_source(), params, rng)
    helpers = {k: recommit(base, positions, k) for k in range(1, 6)}
    assert helpers[5].commitments == base.commitments
    totals = np.zeros(6, dtype=int)
    queries = []
    for j in range(1000):
        queries.append(pop.genuine_query(1, rng) if j % 2 else pop.imposter_query(1, rng))
    for q in queries:
        acc = {k: verify(h, q, tr=2).accepted for k, h in helpers.items()}
        for k in range(2, 6):
            assert acc[k] <= acc[k - 1]
            totals[k] += acc[k]
    assert totals[5] < totals[3]


def test_hash_count_bound(hard_population):
    pop = hard_population
    rng = np.random.default_rng(8)
    for k in (5, 4, 2):
        params = ProtocolParams(gamma=10, n=5, m=50, k=k, dim=64)
        helper = enroll(pop.template(2), pop.chaff_source(), params, rng)
        for q in _mixed_queries(pop, rng, 60):
            for tr in (1, 2, 3, 4):
                res = verify(helper, q, tr=tr)
                assert res.hash_count <= math.comb(5, k) * tr**k
                assert all(len(c) == tr for c in res.candidates)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=60), st.integers(1, 70),
       st.sampled_from([np.float32, np.float64]))
def test_top_indices_matches_stable_argsort(values, tr, dtype):
    s = np.asarray(values, dtype=dtype) / 3
    got = top_indices(s, tr)
    want = np.argsort(-s, kind="stable")[:tr]
    np.testing.assert_array_equal(got, want)


def test_ties_broken_by_lower_index(small_params):
    # every entry identical: the top-tr must be indices 0..tr-1
    rng = np.random.default_rng(0)
    v = np.ones(64, dtype=np.float32)
    vaults = tuple(Vault(np.tile(v, (51, 1)), i) for i in range(5))
    helper = HelperData(small_params, vaults, rng.bytes(16), {(0, 1, 2, 3, 4): b"\x00" * 32})
    res = verify(helper, ChannelSet.of([v] * 5), tr=3)
    assert res.candidates == [[0, 1, 2]] * 5
    assert not res.accepted and res.hash_count == 243


# --- hiding ----------------------------------------------------------------

def test_serialization_hides_template(default_population):
    params = ProtocolParams(gamma=10, n=5, m=200, k=5, dim=512)
    t = default_population.template(5)
    blob = serialize_helper(enroll(t, default_population.chaff_source(), params,
                                   np.random.default_rng(0)))
    for ch in t:
        raw = np.asarray(ch, dtype="<f4").tobytes()
        assert raw not in blob
        # no 32-byte window of the template survives either
        for off in range(0, len(raw) - 32, 32):
            assert raw[off:off + 32] not in blob


def test_template_position_uniform():
    pop = sample_population(PopulationSpec(num_identities=5, dim=16, rng_seed=2))
    params = ProtocolParams(gamma=10, n=5, m=9, k=5, dim=16)
    rng = np.random.default_rng(11)
    counts = np.zeros(10, dtype=int)
    for j in range(1000):
        _, positions = enroll_traced(pop.template(j % 5), pop.chaff_source(), params, rng)
        for p in positions:
            counts[p] += 1
    assert stats.chisquare(counts).pvalue > 0.01


# --- revocation ------------------------------------------------------------

def test_revoke_and_reenroll(default_population):
    pop = default_population
    params = ProtocolParams(gamma=54)
    t = pop.template(9)
    rng = np.random.default_rng(41)
    old = enroll(t, pop.chaff_source(), params, rng)
    new = revoke_and_reenroll(t, old, pop.chaff_source(rng_seed=1234), rng)
    assert new.salt != old.salt
    assert set(new.commitments.values()).isdisjoint(old.commitments.values())
    for ov, nv in zip(old.vaults, new.vaults):
        old_rows = {bytes(r) for r in ov.entries.view("V2048").ravel()}
        new_rows = {bytes(r) for r in nv.entries.view("V2048").ravel()}
        assert old_rows.isdisjoint(new_rows)
    q = pop.genuine_query(9, rng)
    assert verify(old, q, tr=1).accepted and verify(new, q, tr=1).accepted
    assert verify(old, t, tr=1).accepted and verify(new, t, tr=1).accepted
