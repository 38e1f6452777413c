"""Semantic, zero-shot, and panoptic heads over backbone outputs."""

import numpy as np
import pytest

from groupseg import ops
from groupseg.backbone import backbone_forward, init_backbone_params, variant_config
from groupseg.errors import UsageError
from groupseg.gradcheck import finite_diff_grad, max_rel_err, pick_indices
from groupseg.heads import (ClassEmbeddingSet, candidate_mass, init_panoptic_head,
                            init_semantic_head, init_zero_shot_projection,
                            panoptic_candidates, panoptic_merge, panoptic_refine,
                            semantic_aux_logits, semantic_segment, thing_logits,
                            zero_shot_segment)
from groupseg.tensor import Rng, Tape, Tensor


@pytest.fixture(scope="module")
def toy_output():
    params = init_backbone_params(Rng(0), variant_config("toy"))
    out = backbone_forward(Rng(1).uniform((64, 64, 3)), params)
    return params, out


class TestSemantic:
    def test_simplex_preserved(self, toy_output):
        _, out = toy_output
        head = init_semantic_head(Rng(2), 32, 64, 5)
        logits = semantic_segment(out, head)
        assert logits.shape == (256, 5)
        p = ops.softmax_rows(logits)
        assert np.abs(p.data.sum(axis=1) - 1).max() < 1e-9

    def test_onehot_tokens_stay_mixtures(self, toy_output):
        """One-hot per-token distributions upsample to convex mixtures."""
        _, out = toy_output
        y4 = np.eye(4)[Rng(3).integers(0, 4, (4,))]
        from groupseg.assignment import apply_ups_chain
        up = apply_ups_chain(out.chain, 4, 1, Tensor(y4)).data
        assert up.min() >= -1e-12
        assert np.abs(up.sum(axis=1) - 1).max() < 1e-9

    def test_identity_chain_passthrough(self):
        """With identity links the per-patch logits equal per-token logits."""
        from groupseg.assignment import AssignmentChain, ChainLink
        from groupseg.backbone import BackboneOutput
        from groupseg.grouping import AssignmentPair, TokenGrid
        n, d = 16, 64
        eye = np.eye(n)
        links = [ChainLink(AssignmentPair(Tensor(eye), Tensor(eye), "dense"),
                           4, 4, 4, 4) for _ in range(3)]
        tokens = [TokenGrid(Tensor(Rng(4).normal((n, d))), 4, 4) for _ in range(4)]
        out = BackboneOutput(tokens, AssignmentChain(links), Tensor(np.zeros(d)))
        head = init_semantic_head(Rng(5), d, d, 3)
        per_token = ops.mlp_2layer(tokens[3].tokens, head.main_w1, head.main_b1,
                                   head.main_w2, head.main_b2)
        per_patch = semantic_segment(out, head)
        assert np.abs(per_patch.data - per_token.data).max() < 1e-12

    def test_gradcheck_head_and_upsampling(self, toy_output):
        _, out = toy_output
        head = init_semantic_head(Rng(6), 32, 64, 3)
        rng = Rng(7)
        wv = rng.normal((256, 3))

        def run():
            main = semantic_segment(out, head)
            aux = semantic_aux_logits(out, head)
            return ops.add(ops.sum_all(ops.mul(main, Tensor(wv))),
                           ops.sum_all(ops.mul(aux, Tensor(wv))))
        params = [t for _, t in head.named_tensors()]
        with Tape() as t:
            loss = run()
        t.backward(loss)
        for pt in params:
            idx = pick_indices(rng, pt.size, 5)
            fd = finite_diff_grad(lambda _: run().item(), pt, indices=idx)
            err = max_rel_err(fd.reshape(-1)[idx], pt.grad.reshape(-1)[idx], floor=1e-5)
            assert err < 1e-4

    def test_missing_chain_rejected(self, toy_output):
        from groupseg.backbone import BackboneOutput
        from groupseg.assignment import AssignmentChain
        _, out = toy_output
        broken = BackboneOutput(out.stage_tokens, AssignmentChain([]), out.pooled)
        head = init_semantic_head(Rng(8), 32, 64, 3)
        with pytest.raises(UsageError):
            semantic_segment(broken, head)


class TestZeroShot:
    def _embeddings(self, c=4, d=8, background=False, top_k=2):
        v = np.eye(d)[:c]
        return ClassEmbeddingSet([f"class_{i}" for i in range(c)], v,
                                 background=background, top_k=top_k)

    def test_threshold_formula(self):
        """Top-k {0.2, 0.4}: mean 0.3, population std 0.1, threshold 0.4."""
        top = np.array([0.2, 0.4])
        assert abs(top.mean() + top.std() - 0.4) < 1e-12

    def test_unnormalized_rejected(self):
        with pytest.raises(UsageError):
            ClassEmbeddingSet(["a"], np.array([[2.0, 0.0]]))

    def test_orthogonal_recovery(self, toy_output):
        """Tokens equal to class vectors classify perfectly per token."""
        _, out = toy_output
        emb = self._embeddings(c=4, d=8)
        proj = init_zero_shot_projection(Rng(9), 64, 8)
        res = zero_shot_segment(out, emb, proj)
        # per-token argmax from the raw projected tokens
        tok = out.stage_tokens[3].tokens.data @ proj.w.data + proj.b.data
        tok = tok / np.linalg.norm(tok, axis=1, keepdims=True)
        per_token = (tok @ emb.vectors.T).argmax(axis=1)
        assert res.labels.shape == (16, 16)
        assert set(np.unique(res.labels)) <= set(per_token)

    def test_blend_recomputation_oracle(self, toy_output):
        _, out = toy_output
        emb = self._embeddings(c=3, d=8)
        proj = init_zero_shot_projection(Rng(10), 64, 8)
        res = zero_shot_segment(out, emb, proj)
        proj_tok = out.stage_tokens[3].tokens.data @ proj.w.data + proj.b.data
        tok_n = proj_tok / np.linalg.norm(proj_tok, axis=1, keepdims=True)
        pooled = proj_tok.mean(axis=0)
        pooled /= np.linalg.norm(pooled)
        expect = 0.5 * (emb.vectors @ pooled + (tok_n @ emb.vectors.T).max(axis=0))
        assert np.abs(res.class_similarity - expect).max() < 1e-12

    def test_scale_invariance_of_labels(self, toy_output):
        """Scaling all similarities by c>0 scales mean and std identically,
        so foreground labels are unchanged."""
        _, out = toy_output
        emb = self._embeddings(c=4, d=8, background=True, top_k=2)
        proj = init_zero_shot_projection(Rng(11), 64, 8)
        res = zero_shot_segment(out, emb, proj)
        for c in (0.5, 3.0, 17.0):
            scaled = res.patch_similarity * c
            thr = np.sort(res.class_similarity * c)[-2:]
            thr = thr.mean() + thr.std()
            labels = np.where(scaled.max(axis=1) >= thr,
                              scaled.argmax(axis=1) + 1, 0).reshape(16, 16)
            assert np.array_equal(labels, res.labels)

    def test_background_label_zero(self, toy_output):
        _, out = toy_output
        emb = self._embeddings(c=4, d=8, background=True, top_k=2)
        proj = init_zero_shot_projection(Rng(12), 64, 8)
        res = zero_shot_segment(out, emb, proj)
        assert res.threshold is not None
        assert res.labels.min() >= 0 and res.labels.max() <= 4


class TestPanoptic:
    def test_uniform_masses_tie_to_low_indices(self):
        from groupseg.assignment import AssignmentChain, ChainLink
        from groupseg.grouping import AssignmentPair
        u = np.full((16, 4), 0.25)
        link = ChainLink(AssignmentPair(Tensor(u), Tensor(u / u.sum(0)), "dense"),
                         4, 4, 2, 2)
        chain = AssignmentChain([link])
        cand = panoptic_candidates(chain, k=3)
        assert np.array_equal(cand, [0, 1, 2])

    def test_absorbing_token_ranks_first(self):
        from groupseg.assignment import AssignmentChain, ChainLink
        from groupseg.grouping import AssignmentPair
        u = np.zeros((16, 4))
        u[:, 2] = 1.0
        link = ChainLink(AssignmentPair(Tensor(u), Tensor(u / 16), "dense"),
                         4, 4, 2, 2)
        cand = panoptic_candidates(AssignmentChain([link]), k=4)
        assert cand[0] == 2
        assert abs(candidate_mass(AssignmentChain([link]))[2] - 16) < 1e-12

    def test_mass_conservation(self, toy_output):
        _, out = toy_output
        mass = candidate_mass(out.chain)
        assert abs(mass.sum() - 256) < 1e-6

    def test_single_candidate_all_ones(self, toy_output):
        _, out = toy_output
        head = init_panoptic_head(Rng(13), 32, 64, 3, k_candidates=1)
        masks = panoptic_refine(np.array([0]), out, head)
        assert np.abs(masks.data - 1.0).max() < 1e-12

    def test_identical_embeddings_split_evenly(self, toy_output):
        _, out = toy_output
        head = init_panoptic_head(Rng(14), 32, 64, 3)
        masks = panoptic_refine(np.array([1, 1]), out, head)  # same token twice
        assert np.abs(masks.data - 0.5).max() < 1e-12

    def test_masks_lift_to_patch_distributions(self, toy_output):
        _, out = toy_output
        head = init_panoptic_head(Rng(15), 32, 64, 3)
        cand = panoptic_candidates(out.chain, k=4)
        masks = panoptic_refine(cand, out, head)
        from groupseg.assignment import apply_ups_chain
        lifted = apply_ups_chain(out.chain, 3, 1, masks).data
        assert np.abs(lifted.sum(axis=1) - 1).max() < 1e-9
        assert lifted.min() >= -1e-12

    def test_thing_logits_shape(self, toy_output):
        _, out = toy_output
        head = init_panoptic_head(Rng(16), 32, 64, 3)
        cand = panoptic_candidates(out.chain, k=4)
        assert thing_logits(cand, out, head).shape == (4, 4)

    def test_empty_candidates_rejected(self, toy_output):
        _, out = toy_output
        head = init_panoptic_head(Rng(17), 32, 64, 3)
        with pytest.raises(UsageError):
            panoptic_refine(np.array([], dtype=int), out, head)


class TestPanopticMerge:
    def test_no_confident_candidate_pure_semantic(self):
        rng = Rng(18)
        sem = rng.normal((64, 4))
        masks = rng.uniform((64, 3))
        probs = np.full((3, 4), 0.25)  # nothing above 0.5
        cls_map, inst = panoptic_merge(sem, masks, probs, np.array([1, 2, 3]))
        assert np.array_equal(cls_map, sem.argmax(axis=1))
        assert np.all(inst == 0)

    def test_dominant_candidate_claims_all(self):
        rng = Rng(19)
        sem = rng.normal((64, 4))
        masks = np.zeros((64, 2))
        masks[:, 1] = 1.0
        probs = np.array([[0.1, 0.1, 0.1, 0.7], [0.8, 0.1, 0.05, 0.05]])
        cls_map, inst = panoptic_merge(sem, masks, probs, np.array([1, 2, 3]))
        assert np.all(inst == 2)
        assert np.all(cls_map == 1)

    @pytest.mark.parametrize("trial", range(20))
    def test_output_partition(self, trial):
        rng = Rng(trial + 300)
        sem = rng.normal((100, 5))
        masks = rng.uniform((100, 6))
        probs = rng.uniform((6, 4))
        probs /= probs.sum(axis=1, keepdims=True)
        cls_map, inst = panoptic_merge(sem, masks, probs, np.array([2, 3, 4]))
        assert cls_map.shape == (100,) and inst.shape == (100,)
        assert np.all((inst > 0) | (cls_map == sem.argmax(axis=1)))


def test_class_embeddings_json_roundtrip(tmp_path):
    import json
    v = np.eye(3)
    path = tmp_path / "emb.json"
    path.write_text(json.dumps({f"c{i}": list(v[i]) for i in range(3)}))
    emb = ClassEmbeddingSet.from_json(str(path))
    assert emb.names == ["c0", "c1", "c2"]
    assert np.array_equal(emb.vectors, v)
