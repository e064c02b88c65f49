import math

import pytest
import torch

from fdcheck import check_parameter_gradients, perturb_parameters
from queryvis.decoder import (QueryDecoder, TemporalAggregator,
                              export_attention_diagnostics)
from queryvis.geometry import inverse_sigmoid

DIM = 16


def make_features(gen, num_frames, shapes=((6, 6), (3, 3)), dim=DIM,
                  dtype=torch.float64):
    return [[torch.randn(dim, h, w, generator=gen, dtype=dtype) for h, w in shapes]
            for _ in range(num_frames)]


def simple_box_predictor(box_embeddings, references):
    return torch.sigmoid(box_embeddings[..., :4] + inverse_sigmoid(references))


def make_decoder(**kw):
    torch.manual_seed(0)
    defaults = dict(dim=DIM, num_layers=2, num_queries=4, num_heads=2,
                    num_levels=2, num_points=2)
    defaults.update(kw)
    dec = QueryDecoder(**defaults).double()
    perturb_parameters(dec, std=0.1, seed=5)
    return dec


class TestTemporalAggregator:
    def test_single_frame_exact(self):
        torch.manual_seed(1)
        agg = TemporalAggregator(DIM, mode="weighted").double()
        perturb_parameters(agg, std=0.5, seed=1)
        box = torch.randn(1, 3, DIM, dtype=torch.float64)
        inst = torch.randn(3, DIM, dtype=torch.float64)
        out, weights = agg(box, inst)
        assert torch.equal(out, box[0] + inst)  # exact, weight cancels to 1.0
        assert torch.equal(weights, torch.ones(1, 3, dtype=torch.float64))

    def test_weights_sum_to_one(self):
        torch.manual_seed(2)
        agg = TemporalAggregator(DIM, mode="weighted").double()
        perturb_parameters(agg, std=0.5, seed=2)
        box = torch.randn(5, 4, DIM, dtype=torch.float64)
        _, weights = agg(box, torch.zeros(4, DIM, dtype=torch.float64))
        assert torch.allclose(weights.sum(0), torch.ones(4, dtype=torch.float64),
                              atol=1e-6)

    def test_constant_logits_equal_average_mode(self):
        torch.manual_seed(3)
        agg_w = TemporalAggregator(DIM, mode="weighted").double()
        with torch.no_grad():
            agg_w.frame_logit.weight.zero_()
            agg_w.frame_logit.bias.fill_(0.7)
        agg_a = TemporalAggregator(DIM, mode="average").double()
        box = torch.randn(4, 3, DIM, dtype=torch.float64)
        inst = torch.randn(3, DIM, dtype=torch.float64)
        out_w, w_w = agg_w(box, inst)
        out_a, w_a = agg_a(box, inst)
        assert torch.allclose(out_w, out_a, atol=1e-6)
        assert torch.allclose(w_w, w_a, atol=1e-12)

    def test_matches_dense_reference(self):
        # independent elementwise evaluation of the weighted-sum formula
        torch.manual_seed(4)
        agg = TemporalAggregator(DIM, mode="weighted").double()
        perturb_parameters(agg, std=0.5, seed=4)
        T, N = 5, 3
        gen = torch.Generator().manual_seed(4)
        box = torch.randn(T, N, DIM, generator=gen, dtype=torch.float64)
        inst = torch.randn(N, DIM, generator=gen, dtype=torch.float64)
        out, weights = agg(box, inst)

        W, b = agg.frame_logit.weight.detach()[0], agg.frame_logit.bias.detach()[0]
        for n in range(N):
            logits = torch.tensor([float(box[t, n] @ W + b) for t in range(T)],
                                  dtype=torch.float64)
            exps = torch.exp(logits - logits.max())
            w_ref = exps / exps.sum()
            expected = sum(w_ref[t] * box[t, n] for t in range(T)) + inst[n]
            assert torch.allclose(out[n], expected, atol=1e-6)
            assert torch.allclose(weights[:, n], w_ref, atol=1e-6)

    def test_sum_mode(self):
        agg = TemporalAggregator(DIM, mode="sum").double()
        box = torch.randn(3, 2, DIM, dtype=torch.float64)
        inst = torch.randn(2, DIM, dtype=torch.float64)
        out, _ = agg(box, inst)
        assert torch.allclose(out, box.sum(0) + inst)

    def test_frame_mask_restricts(self):
        torch.manual_seed(6)
        agg = TemporalAggregator(DIM, mode="weighted").double()
        perturb_parameters(agg, std=0.5, seed=6)
        box = torch.randn(4, 2, DIM, dtype=torch.float64)
        inst = torch.zeros(2, DIM, dtype=torch.float64)
        mask = torch.tensor([True, False, True, False])
        out, weights = agg(box, inst, frame_mask=mask)
        assert torch.all(weights[~mask] == 0)
        assert torch.allclose(weights.sum(0), torch.ones(2, dtype=torch.float64))
        out_sub, _ = agg(box[mask], inst)
        assert torch.allclose(out, out_sub, atol=1e-12)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            TemporalAggregator(DIM, mode="max")

    def test_rejects_empty_mask(self):
        agg = TemporalAggregator(DIM)
        with pytest.raises(ValueError):
            agg(torch.zeros(2, 1, DIM), torch.zeros(1, DIM),
                frame_mask=torch.zeros(2, dtype=torch.bool))


class TestQueryDecoder:
    def test_identical_frames_identical_box_queries(self):
        dec = make_decoder()
        gen = torch.Generator().manual_seed(0)
        frame = [torch.randn(DIM, 6, 6, generator=gen, dtype=torch.float64),
                 torch.randn(DIM, 3, 3, generator=gen, dtype=torch.float64)]
        other = [torch.randn(DIM, 6, 6, generator=gen, dtype=torch.float64),
                 torch.randn(DIM, 3, 3, generator=gen, dtype=torch.float64)]
        states = dec([frame, other, frame], simple_box_predictor)
        for state in states:
            assert torch.equal(state.box_queries[0], state.box_queries[2])
            assert not torch.allclose(state.box_queries[0], state.box_queries[1])

    def test_layer1_sampling_points_equal_across_frames(self):
        dec = make_decoder(num_layers=3)
        gen = torch.Generator().manual_seed(1)
        feats = make_features(gen, num_frames=4)
        states = dec(feats, simple_box_predictor, collect_locations=True)
        first = states[0].sampling_locations
        for t in range(1, 4):
            assert torch.allclose(first[0], first[t], atol=0)
        # later layers refine per frame, so locations diverge
        later = states[1].sampling_locations
        assert any(not torch.allclose(later[0], later[t]) for t in range(1, 4))

    def test_minimal_shapes(self):
        dec = make_decoder(num_layers=1, num_queries=1)
        gen = torch.Generator().manual_seed(2)
        feats = make_features(gen, num_frames=1)
        states = dec(feats, simple_box_predictor)
        assert len(states) == 1
        assert states[0].inst_queries.shape == (1, DIM)
        assert states[0].box_queries.shape == (1, 1, DIM)
        assert states[0].boxes.shape == (1, 1, 4)

    def test_decompose_off_differs_same_shapes(self):
        gen = torch.Generator().manual_seed(3)
        feats = make_features(gen, num_frames=3)
        dec_on = make_decoder(decompose=True)
        dec_off = make_decoder(decompose=False)
        dec_off.load_state_dict(dec_on.state_dict())
        s_on = dec_on(feats, simple_box_predictor)
        s_off = dec_off(feats, simple_box_predictor)
        assert s_on[-1].box_queries.shape == s_off[-1].box_queries.shape
        assert s_on[-1].inst_queries.shape == s_off[-1].inst_queries.shape
        # layer 1 is the shared decompose step; the paths diverge afterwards
        assert torch.allclose(s_on[0].box_queries, s_off[0].box_queries)
        assert not torch.allclose(s_on[-1].box_queries, s_off[-1].box_queries)

    def test_decompose_off_shares_sampling_region_across_frames(self):
        gen = torch.Generator().manual_seed(11)
        feats = make_features(gen, num_frames=3)
        dec_off = make_decoder(decompose=False, num_layers=3)
        states = dec_off(feats, simple_box_predictor, collect_locations=True)
        for state in states:
            locs = state.sampling_locations
            assert torch.allclose(locs[0], locs[1], atol=0)
            assert torch.allclose(locs[0], locs[2], atol=0)
        # with decomposition the regions follow each frame separately
        dec_on = make_decoder(decompose=True, num_layers=3)
        states_on = dec_on(feats, simple_box_predictor, collect_locations=True)
        later = states_on[-1].sampling_locations
        assert not torch.allclose(later[0], later[1])

    def test_query_permutation_equivariance(self):
        dec = make_decoder()
        gen = torch.Generator().manual_seed(4)
        feats = make_features(gen, num_frames=2)
        states = dec(feats, simple_box_predictor)

        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            dec.query_content.weight.copy_(dec.query_content.weight[perm])
            dec.query_pos.weight.copy_(dec.query_pos.weight[perm])
            dec.reference_logits.weight.copy_(dec.reference_logits.weight[perm])
        states_p = dec(feats, simple_box_predictor)
        assert torch.allclose(states_p[-1].inst_queries,
                              states[-1].inst_queries[perm], atol=1e-9)
        assert torch.allclose(states_p[-1].box_queries,
                              states[-1].box_queries[:, perm], atol=1e-9)

    def test_frame_locality_within_layer(self):
        dec = make_decoder(num_layers=1)
        gen = torch.Generator().manual_seed(5)
        feats = make_features(gen, num_frames=3)
        states = dec(feats, simple_box_predictor)
        zeroed = [list(f) for f in feats]
        zeroed[1] = [torch.zeros_like(lvl) for lvl in feats[1]]
        states_z = dec(zeroed, simple_box_predictor)
        assert torch.equal(states.__getitem__(0).box_queries[0],
                           states_z[0].box_queries[0])
        assert torch.equal(states[0].box_queries[2], states_z[0].box_queries[2])
        assert not torch.allclose(states[0].box_queries[1],
                                  states_z[0].box_queries[1])

    def test_uniform_fallback_with_zeroed_projection(self):
        dec = make_decoder(num_layers=1, aggregation="weighted")
        with torch.no_grad():
            for layer in dec.layers:
                layer.aggregator.frame_logit.weight.zero_()
                layer.aggregator.frame_logit.bias.zero_()
        gen = torch.Generator().manual_seed(6)
        feats = make_features(gen, num_frames=4)
        states = dec(feats, simple_box_predictor)
        assert torch.allclose(states[0].frame_weights,
                              torch.full((4, 4), 0.25, dtype=torch.float64))

    def test_references_refine_layer_to_layer(self):
        dec = make_decoder(num_layers=3)
        gen = torch.Generator().manual_seed(7)
        feats = make_features(gen, num_frames=2)
        states = dec(feats, simple_box_predictor)
        assert torch.equal(states[1].references, states[0].boxes)
        assert torch.equal(states[2].references, states[1].boxes)

    def test_gradients_match_finite_differences(self):
        # detached reference refinement deliberately blocks those gradient
        # paths, so the check runs with the toggle off
        dec = make_decoder(num_layers=2, num_queries=3, detach_references=False)
        gen = torch.Generator().manual_seed(8)
        feats = make_features(gen, num_frames=2, shapes=((4, 4), (2, 2)))
        probe = torch.randn(3, DIM, generator=gen, dtype=torch.float64)

        def loss_fn():
            states = dec(feats, simple_box_predictor)
            inst, box_q = dec.output_embeddings(states[-1])
            return (inst * probe).sum() + states[-1].boxes.sum() + box_q.mean()

        worst = check_parameter_gradients(loss_fn, list(dec.named_parameters()),
                                          eps=1e-6, rel_tol=1e-3)
        assert worst < 1e-3


class TestDiagnosticsExport:
    def _run(self, num_frames, num_layers=2):
        dec = make_decoder(num_layers=num_layers)
        gen = torch.Generator().manual_seed(9)
        feats = make_features(gen, num_frames=num_frames)
        states = dec(feats, simple_box_predictor, collect_locations=True)
        return export_attention_diagnostics(states)

    def test_weights_sum_to_one(self):
        record = self._run(num_frames=3)
        weights = torch.tensor(record["frame_weights"])  # (layers, T, N)
        assert torch.allclose(weights.sum(1), torch.ones_like(weights.sum(1)),
                              atol=1e-6)

    def test_single_frame_weight_is_one(self):
        record = self._run(num_frames=1)
        weights = torch.tensor(record["frame_weights"])
        assert torch.allclose(weights, torch.ones_like(weights))

    def test_layer1_points_shared_across_frames(self):
        record = self._run(num_frames=3)
        pts = record["sampling_points"][0]
        assert pts[0] == pts[1] == pts[2]

    def test_json_serializable(self):
        import json
        record = self._run(num_frames=2)
        parsed = json.loads(json.dumps(record))
        assert parsed["num_frames"] == 2
        assert len(parsed["sampling_points"]) == parsed["num_layers"]

    def test_requires_collected_locations(self):
        dec = make_decoder(num_layers=1)
        gen = torch.Generator().manual_seed(10)
        states = dec(make_features(gen, 2), simple_box_predictor)
        with pytest.raises(ValueError, match="collect_locations"):
            export_attention_diagnostics(states)
