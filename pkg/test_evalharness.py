"""
Evaluation harness tests - metrics, protocols, quality proxies and report files
"""
import json
import os

import numpy as np
import pandas as pd
import pytest

from analytics.report_tracker import ReportTracker
from editctl import ControlSpecError, EditConfig
from evalharness import (COMPONENT_GRID, MetricReport, MotionClassifier, batch_keyframe_errors, clip_descriptor,
                         components_suite, cross_combinations, density_sweep, diversity_proxy, foot_skate,
                         heldout_masked_nll, keyframe_errors, keyframe_mask, random_keyframes, upper_body_protocol)
from kinematics import SkeletonError, SpatialControl
from motiondata.data_manager import stack_labels, stack_motions
from motiondata.synthetic import make_dataset


def single_entry_control(frames=4, joints=2, frame=1, joint=0, target=(0.0, 0.0, 0.0)):
    targets = np.zeros((frames, joints, 3))
    mask = np.zeros((frames, joints))
    targets[frame, joint] = target
    mask[frame, joint] = 1.0
    return SpatialControl(targets, mask)


class TestKeyframeErrors:
    def test_single_close_entry(self):
        control = single_entry_control()
        gen = np.zeros((4, 2, 3))
        gen[1, 0] = [0.15, 0.0, 0.0]
        traj, loc, avg = keyframe_errors(gen, control)
        assert traj == 0.0 and loc == 0.0
        assert avg == pytest.approx(0.15)

    def test_miss_counts(self):
        targets = np.zeros((4, 2, 3))
        mask = np.zeros((4, 2))
        mask[[0, 1, 2, 3], 0] = 1.0
        gen = np.zeros((4, 2, 3))
        gen[2, 0] = [0.0, 0.6, 0.0]
        traj, loc, avg = keyframe_errors(gen, SpatialControl(targets, mask))
        assert traj == 1.0
        assert loc == pytest.approx(0.25)
        assert avg == pytest.approx(0.15)

    def test_batch_average(self):
        control = single_entry_control()
        near, far = np.zeros((4, 2, 3)), np.zeros((4, 2, 3))
        near[1, 0] = [0.1, 0.0, 0.0]
        far[1, 0] = [1.0, 0.0, 0.0]
        traj, loc, avg = batch_keyframe_errors([near, far], [control, control])
        assert traj == pytest.approx(0.5)
        assert loc == pytest.approx(0.5)
        assert avg == pytest.approx(0.55)

    def test_trajectory_error_bounds_location_error(self, rng):
        for _ in range(50):
            mask = (rng.uniform(size=(8, 3)) < 0.4).astype(float)
            mask[0, 0] = 1.0
            control = SpatialControl(rng.normal(size=(8, 3, 3)), mask)
            traj, loc, _ = keyframe_errors(control.targets + rng.normal(scale=0.4, size=(8, 3, 3)), control)
            assert traj >= loc

    def test_errors(self):
        with pytest.raises(ControlSpecError):
            keyframe_errors(np.zeros((4, 2, 3)), SpatialControl.empty(4, 2))
        with pytest.raises(SkeletonError):
            keyframe_errors(np.zeros((4, 3, 3)), single_entry_control())
        with pytest.raises(ValueError):
            batch_keyframe_errors([], [])


class TestFootSkate:
    names = ('pelvis', 'left_foot')

    def test_static_grounded_foot(self):
        gen = np.zeros((5, 2, 3))
        assert foot_skate(gen, self.names) == 0.0

    def test_sliding_grounded_foot(self):
        gen = np.zeros((5, 2, 3))
        gen[:, 1, 0] = 0.1 * np.arange(5)
        assert foot_skate(gen, self.names) == 1.0

    def test_lifted_foot_may_move(self):
        gen = np.zeros((5, 2, 3))
        gen[:, 1, 0] = 0.1 * np.arange(5)
        gen[:, 1, 1] = 0.2
        gen[4, 1, 1] = 0.0
        assert foot_skate(gen, self.names) == pytest.approx(0.25)

    def test_edge_cases(self):
        assert foot_skate(np.zeros((1, 2, 3)), self.names) == 0.0
        with pytest.raises(SkeletonError):
            foot_skate(np.zeros((3, 2, 3)), ('pelvis', 'head'))


class TestDiversity:
    def test_identical_samples(self):
        assert diversity_proxy([np.ones((4, 2, 3))] * 3) == 0.0

    def test_constant_offset(self):
        a = np.zeros((4, 2, 3))
        b = a.copy()
        b[..., 0] = 1.0
        assert diversity_proxy([a, b], pairs=10) == pytest.approx(1.0)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            diversity_proxy([np.zeros((4, 2, 3))])


class TestKeyframes:
    def test_random_keyframes(self, rng):
        frames = random_keyframes(16, 5, rng)
        assert len(set(frames.tolist())) == 5
        assert np.all(np.diff(frames) > 0)
        with pytest.raises(ControlSpecError):
            random_keyframes(16, 0, rng)
        with pytest.raises(ControlSpecError):
            random_keyframes(16, 17, rng)

    def test_keyframe_mask(self, rng):
        mask = keyframe_mask(16, [0, 3], 6, 4, rng)
        assert mask[:, 0].sum() == 4 and mask[:, 3].sum() == 4
        assert mask.sum() == 8


class TestCrossCombinations:
    def test_enumeration(self):
        combos = cross_combinations()
        assert len(combos) == 63
        assert len(set(combos)) == 63
        assert combos[0] == ('pelvis',)
        assert combos[-1] == ('pelvis', 'left_foot', 'right_foot', 'head', 'left_wrist', 'right_wrist')
        assert combos[11] == ('left_foot', 'right_foot')

    def test_component_grid(self):
        assert len(COMPONENT_GRID) == 8
        assert COMPONENT_GRID[0] == (False, False, False)
        assert COMPONENT_GRID[-1] == (True, True, True)


class TestMetricReport:
    def test_validation(self):
        with pytest.raises(ValueError):
            MetricReport('bad', traj_err=1.5)
        with pytest.raises(ValueError):
            MetricReport('bad', avg_err=-0.1)
        assert MetricReport('ok', avg_err=3.0).avg_err == 3.0

    def test_row(self):
        row = MetricReport('x', 0.5, 0.25, 0.3, 0.1, 0.7, 5, ('pelvis', 'head'), 4, {'flag': True}).to_row()
        assert row['Joints'] == 'pelvis+head'
        assert row['Avg. Err.'] == 0.3
        assert row['flag'] is True


class TestProtocols:
    @pytest.fixture
    def template(self, make_request):
        return make_request(edit=EditConfig(steps_logits=0, steps_code=2), iterations=2)

    def test_density_sweep(self, trained, tiny_data, template, tiny_config):
        reports = density_sweep(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels,
                                template, samples=2)
        assert [r.density for r in reports] == [1, 2, 5, tiny_config.frames // 4, tiny_config.frames]
        assert all(r.samples == 2 for r in reports)
        flags = {r.extras['avg_err_increases'] for r in reports}
        assert len(flags) == 1

    def test_density_level_out_of_range(self, trained, tiny_data, template, tiny_config):
        with pytest.raises(ControlSpecError):
            density_sweep(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels, template,
                          levels=[1, tiny_config.frames + 1])

    def test_components_suite(self, trained, tiny_data, template):
        reports = components_suite(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels,
                                   template, keyframes=2, samples=2)
        assert [r.name for r in reports] == [f'#{k}' for k in range(1, 9)]
        assert reports[-1].extras == {'Logits Editing': True, 'Codebook Editing': True, 'Control Branch': True}

    def test_upper_body(self, trained, tiny_data, template, tiny_config):
        report = upper_body_protocol(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels,
                                     template, samples=2)
        assert report.extras['controlled_entries'] == 3 * tiny_config.frames
        assert report.joints == ('pelvis', 'left_foot', 'right_foot')
        assert np.isfinite(report.diversity_proxy)

    def test_threshold_reaches_reports(self, trained, tiny_data, template):
        strict = upper_body_protocol(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels,
                                     template, samples=2, threshold=0.0)
        lenient = upper_body_protocol(trained.models, tiny_data.heldout_motions, tiny_data.heldout_labels,
                                      template, samples=2, threshold=1e6)
        assert strict.traj_err == 1.0 and strict.loc_err == 1.0
        assert lenient.traj_err == 0.0 and lenient.loc_err == 0.0
        assert strict.avg_err == lenient.avg_err


class TestQuality:
    def test_heldout_nll(self, trained, tiny_data, tiny_config):
        nll = heldout_masked_nll(trained.base, trained.tokenizer, tiny_data.heldout_features,
                                 tiny_data.heldout_labels, tiny_config.seed)
        assert np.isfinite(nll) and nll > 0

    def test_clip_descriptor(self):
        motion = make_dataset(1, 16, 6, seed=0)[0].global_motion
        assert clip_descriptor(motion).shape == (3 * 19,)

    def test_classifier_separates_classes(self):
        classifier = MotionClassifier().fit(n=96, frames=32, seed=0)
        heldout = make_dataset(40, 32, 6, seed=1, stream='heldout')
        accuracy = classifier.accuracy(stack_motions(heldout), stack_labels(heldout))
        assert accuracy > 0.4
        assert classifier.train_accuracy >= accuracy

    def test_classifier_is_seeded(self):
        motions = stack_motions(make_dataset(12, 32, 6, seed=2, stream='heldout'))
        a = MotionClassifier().fit(n=48, frames=32, seed=5, n_estimators=20)
        b = MotionClassifier().fit(n=48, frames=32, seed=5, n_estimators=20)
        assert np.array_equal(a.predict(motions), b.predict(motions))

    def test_untrained_classifier(self):
        with pytest.raises(RuntimeError):
            MotionClassifier().predict([np.zeros((4, 6, 3))])


class TestReportTracker:
    def test_save(self, tiny_config, tmp_path):
        tracker = ReportTracker(tiny_config, str(tmp_path))
        tracker.add_reports('density', [MetricReport('density_1', 0.0, 0.0, 0.1, 0.0, 0.2, 1, ('pelvis',), 2),
                                        MetricReport('density_2', 1.0, 0.5, 0.6, 0.0, 0.3, 2, ('pelvis',), 2)],
                            notes={'profile': 'fast'})
        json_path, csv_path = tracker.save('density')
        with open(json_path) as f:
            data = json.load(f)
        assert data['seed'] == tiny_config.seed
        assert data['notes'] == {'profile': 'fast'}
        assert len(data['rows']) == 2
        table = pd.read_csv(csv_path)
        assert table['Avg. Err.'].tolist() == [0.1, 0.6]
        assert os.path.basename(csv_path) == 'density.csv'
        assert 'DENSITY' in tracker.get_summary('density')

    def test_unknown_suite(self, tiny_config, tmp_path):
        with pytest.raises(KeyError):
            ReportTracker(tiny_config, str(tmp_path)).get_reports_df('cross')

    def test_reports_are_byte_identical(self, tiny_config, tmp_path):
        rows = [MetricReport('upper_body', 0.5, 0.25, 0.1, 0.0, 0.2, 16, ('pelvis',), 2)]
        paths = []
        for name in ('first', 'second'):
            tracker = ReportTracker(tiny_config, str(tmp_path / name))
            tracker.add_reports('upperbody', rows)
            paths.append(tracker.save('upperbody')[0])
        with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
            assert a.read() == b.read()
        stamped = ReportTracker(tiny_config, str(tmp_path / 'stamped'), stamp_time=True)
        stamped.add_reports('upperbody', rows)
        assert 'created' in stamped.export_to_dict('upperbody')
        assert 'created' not in tracker.export_to_dict('upperbody')
