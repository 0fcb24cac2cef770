import numpy as np
import pytest

from skelalign.errors import (BankLookupError, ConfigError, CorpusError,
                              DataFormatError)
from skelalign.graph import build_partition
from skelalign.textbank import (ClassDescription, DescriptionCorpus,
                                HashedEmbedder, build_bank, hashed_embed,
                                knn_select, load_bank, sample_variant,
                                save_bank)


def _corpus(num_classes=2, parts=("head", "hands", "hip", "legs")):
    classes = []
    for c in range(num_classes):
        classes.append(ClassDescription(
            class_id=c,
            label_name=f"action {c}",
            paragraph=f"The person performs action {c} with vigour.",
            synonyms=[f"synonym {c} {i}" for i in range(10)],
            part_descriptions={p: f"{p} motion of class {c}" for p in parts},
        ))
    return DescriptionCorpus(classes)


# -- hashed embedding ----------------------------------------------------------


def test_hashed_embed_deterministic_unit_norm():
    a = hashed_embed("raise both arms", 64)
    b = hashed_embed("raise both arms", 64)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)


def test_hashed_embed_order_free():
    np.testing.assert_array_equal(hashed_embed("hand waves", 64),
                                  hashed_embed("waves hand", 64))


def test_hashed_embed_empty_text_is_basis_vector():
    v = hashed_embed("  --- ", 32)
    assert v[0] == 1.0 and np.abs(v[1:]).max() == 0.0


def test_hashed_embed_dim_floor():
    with pytest.raises(ConfigError):
        hashed_embed("x", 4)


def test_hashed_embed_seed_changes_space():
    assert not np.allclose(hashed_embed("jump", 64, seed=0),
                           hashed_embed("jump", 64, seed=1))


def test_disjoint_token_pairs_nearly_orthogonal():
    # Monte Carlo: random disjoint token pairs at dim 256 should almost
    # always land below |cos| = 0.3.
    rng = np.random.default_rng(123)
    hits = 0
    trials = 1000
    for i in range(trials):
        a = hashed_embed(f"tok{2 * i}a tok{2 * i}b", 256)
        b = hashed_embed(f"tok{2 * i + 1}c tok{2 * i + 1}d", 256)
        if abs(float(a @ b)) < 0.3:
            hits += 1
    assert hits / trials > 0.99


# -- bank construction -----------------------------------------------------------


def test_label_name_bank_count_contract(toy_graph):
    partition = build_partition("global", toy_graph)
    bank = build_bank(_corpus(2, parts=("body",)), partition, "label_name",
                      HashedEmbedder(32))
    assert bank.num_slots == 1
    assert len(bank.entries) == 2
    assert all(len(v) == 1 for v in bank.entries.values())


def test_synonym_bank_has_ten_variants_per_slot(four_part):
    bank = build_bank(_corpus(), four_part, "synonym", HashedEmbedder(32))
    assert bank.num_slots == 5
    assert all(len(v) == 10 for v in bank.entries.values())


def test_body_parts_bank_distinct_slots(four_part):
    bank = build_bank(_corpus(), four_part, "body_parts", HashedEmbedder(64))
    v_head = bank.variants(0, 0)[0]
    v_hands = bank.variants(0, 1)[0]
    assert abs(float(np.dot(v_head, v_hands))) < 0.999
    assert all(len(v) == 1 for v in bank.entries.values())


def test_synonym_plus_parts_layout(four_part):
    bank = build_bank(_corpus(), four_part, "synonym_plus_parts", HashedEmbedder(64))
    for c in range(2):
        for slot in range(4):
            assert len(bank.variants(c, slot)) == 1
        assert len(bank.variants(c, 4)) == 10  # global slot carries synonyms


def test_missing_part_description_rejected(four_part):
    corpus = _corpus(parts=("head", "hands", "hip"))  # no "legs"
    with pytest.raises(CorpusError):
        build_bank(corpus, four_part, "body_parts", HashedEmbedder(32))


def test_bank_vectors_unit_norm_and_pure(four_part):
    bank_a = build_bank(_corpus(), four_part, "synonym_plus_parts", HashedEmbedder(48))
    bank_b = build_bank(_corpus(), four_part, "synonym_plus_parts", HashedEmbedder(48))
    for key, variants in bank_a.entries.items():
        for i, v in enumerate(variants):
            assert np.linalg.norm(v.astype(np.float64)) == pytest.approx(1.0, abs=1e-6)
            np.testing.assert_array_equal(v, bank_b.entries[key][i])


def test_corpus_dense_ids_enforced():
    with pytest.raises(CorpusError):
        DescriptionCorpus([ClassDescription(1, "x", "", [], {})])


# -- variant sampling --------------------------------------------------------------


def test_sample_single_variant_always_returned(four_part):
    bank = build_bank(_corpus(), four_part, "label_name", HashedEmbedder(32))
    rng = np.random.default_rng(0)
    v = sample_variant(bank, 0, 0, rng)
    np.testing.assert_array_equal(v, bank.variants(0, 0)[0])


def test_sample_variant_reproducible(four_part):
    bank = build_bank(_corpus(), four_part, "synonym", HashedEmbedder(32))
    draws_a = [sample_variant(bank, 0, 0, np.random.default_rng(7))[0] for _ in range(1)]
    draws_b = [sample_variant(bank, 0, 0, np.random.default_rng(7))[0] for _ in range(1)]
    assert draws_a == draws_b


def test_sample_variant_roughly_uniform(four_part):
    bank = build_bank(_corpus(), four_part, "synonym", HashedEmbedder(32))
    variants = bank.variants(1, 2)
    lookup = {v.tobytes(): i for i, v in enumerate(variants)}
    rng = np.random.default_rng(99)
    counts = np.zeros(10)
    for _ in range(10_000):
        counts[lookup[sample_variant(bank, 1, 2, rng).tobytes()]] += 1
    freqs = counts / 10_000
    assert freqs.min() >= 0.08 and freqs.max() <= 0.12


def test_sample_missing_entry(four_part):
    bank = build_bank(_corpus(), four_part, "label_name", HashedEmbedder(32))
    with pytest.raises(BankLookupError):
        sample_variant(bank, 9, 0, np.random.default_rng(0))


# -- knn selection -------------------------------------------------------------------


def test_knn_exact_match_ranks_first():
    embedder = HashedEmbedder(128)
    candidates = ["foot stomp", "wave hand high", "head nod"]
    assert knn_select("wave hand high", candidates, 1, embedder) == [1]


def test_knn_all_candidates_is_permutation():
    embedder = HashedEmbedder(128)
    candidates = ["alpha beta", "gamma delta", "epsilon zeta", "eta theta"]
    order = knn_select("alpha", candidates, 4, embedder)
    assert sorted(order) == [0, 1, 2, 3]


def test_knn_shared_tokens_dominate():
    embedder = HashedEmbedder(256)
    candidates = ["hand waving motion", "foot stomp", "head nod"]
    assert knn_select("wave hand", candidates, 3, embedder)[0] == 0


def test_knn_scale_invariant():
    base = HashedEmbedder(64)
    scaled = lambda text: 3.7 * base(text)  # noqa: E731
    candidates = ["swing arms", "kick leg", "tilt head", "swing leg"]
    assert (knn_select("swing the leg", candidates, 4, base)
            == knn_select("swing the leg", candidates, 4, scaled))


def test_knn_input_validation():
    embedder = HashedEmbedder(64)
    with pytest.raises(ConfigError):
        knn_select("x", [], 1, embedder)
    with pytest.raises(ConfigError):
        knn_select("x", ["a"], 2, embedder)


# -- serialization ----------------------------------------------------------------


def test_bank_round_trip_bit_exact(four_part, tmp_path):
    bank = build_bank(_corpus(), four_part, "synonym_plus_parts", HashedEmbedder(64))
    first = tmp_path / "a"
    save_bank(bank, first)
    loaded = load_bank(first)
    second = tmp_path / "b"
    save_bank(loaded, second)
    assert (first / "bank.f32").read_bytes() == (second / "bank.f32").read_bytes()
    assert (first / "bank.json").read_text() == (second / "bank.json").read_text()
    for key, variants in bank.entries.items():
        for i, v in enumerate(variants):
            np.testing.assert_array_equal(v, loaded.entries[key][i])


def test_bank_bad_offset_rejected(four_part, tmp_path):
    bank = build_bank(_corpus(), four_part, "label_name", HashedEmbedder(32))
    save_bank(bank, tmp_path)
    doc = (tmp_path / "bank.json").read_text().replace('"offset": 0', '"offset": 999')
    (tmp_path / "bank.json").write_text(doc)
    with pytest.raises(DataFormatError):
        load_bank(tmp_path)


def test_corpus_json_round_trip(tmp_path):
    corpus = _corpus()
    path = tmp_path / "corpus.json"
    corpus.save(path)
    loaded = DescriptionCorpus.load(path)
    assert loaded.num_classes == corpus.num_classes
    assert loaded.classes[1].synonyms == corpus.classes[1].synonyms
    assert loaded.classes[0].part_descriptions == corpus.classes[0].part_descriptions
