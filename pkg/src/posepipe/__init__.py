"""Streaming camera pose estimation.

Co-visibility-based block partitioning of an image sequence, per-block
bundle adjustment with a self-adaptive Levenberg-Marquardt solver, and
progressive global alignment by single rotation averaging on shared
cameras.
"""

from .geom import (EPS_AXIS, EPS_DEPTH, Intrinsics, NearPiAmbiguity,
                   NonPositiveDepth, Pose, Rotation3, exp_map,
                   geodesic_distance, log_map, project, random_rotation,
                   rot_x, rot_y, rot_z)
from .scene import (DegenerateConfig, Frame, GroundTruth, Landmark,
                    SceneProblem, SynthConfig, covisible_count,
                    generate_synthetic)
from .problem_io import (IndexOutOfRange, ParseError, load_problem,
                         save_problem)
from .partition import (Block, EmptyBlock, OnlinePartitioner, OutOfOrderFrame,
                        PartitionConfig, global_covisibility_score,
                        local_covisibility_score, partition_all,
                        select_added_cameras)
from .solver import (FunctionSystem, LinearSolveFailure, NonFiniteResidual,
                     ResidualSystem, SolveResult, SolverConfig, SolverDiverged,
                     SolverState, convergence_order, lm_step, rho_update,
                     solve, write_trace_csv)
from .local_ba import (BlockBundleProblem, InsufficientConstraints,
                       LocalSolution, MissingSnapshot, PoseGraph,
                       SpanningForest, build_msf, build_pose_graph,
                       initial_relative_poses, solve_local,
                       triangulate_midpoint)
from .align import (BlockRotationGraph, DisconnectedBlock, EmptyMeasurements,
                    SharedCameraSet, align_pair, averaging_objective,
                    chordal_mean, collect_shared, compose_trajectory,
                    global_update, rotation_measurements,
                    single_rotation_average)
from .pipeline import (PipelineError, RunConfig, RunReport, TooFewFrames,
                       ate_rmse, emit_metrics_csv, export_trajectory,
                       load_trajectory, run_pipeline)

__version__ = "0.1.0"
