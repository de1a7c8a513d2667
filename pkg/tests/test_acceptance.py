"""Acceptance gate: every shipped behavior contract, one test per claim.

Each test prints one PASS/FAIL line per metric and asserts them jointly.
All numbers come from volcap.evalsuite via the session fixture; nothing
is recomputed here, so the CLI `eval` command and this file can never
disagree.
"""

from volcap import evalsuite as ev


def _check(rows, names):
    missing = [n for n in names if n not in rows]
    assert not missing, f"metrics never produced: {missing}"
    print()
    failed = []
    for name in names:
        r = rows[name]
        status = "PASS" if r.passed else "FAIL"
        line = (f"{status} {name} = {r.value:.6g} "
                f"({r.direction} {r.threshold:g}) [{r.seconds:.1f}s]")
        if r.note:
            line += f"  {r.note}"
        print(line)
        if not r.passed:
            failed.append(line)
    assert not failed, "; ".join(failed)


def test_gradients_match_finite_differences(acceptance_rows):
    _check(acceptance_rows,
           [f"grad_{op}_max_rel" for op in ev.GRADIENT_OPS]
           + ["grad_suite_seconds"])


def test_fusion_recovers_rotation_fields(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["fusion"])


def test_decomposition_yields_pose_invariant_template(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["decomposition"])


def test_texture_supervision_pins_correspondence(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["texture"])


def test_reconstruction_iou_on_held_out_poses(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["reconstruction"])


def test_fusion_beats_replacement_under_pose_error(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["capture"])


def test_closed_form_oracles(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["oracles"])


def test_pipeline_is_byte_deterministic(acceptance_rows):
    _check(acceptance_rows, ev.SUITE_METRICS["determinism"])
