"""Distribution-aware DPO distillation at desk scale.

The package implements the full preference-distillation loss family
(supervised, token-KL, plain DPO, teacher-referenced DPO, the
distribution-aware combination, and +KL composites), the closed-form
optimum of the doubly KL-regularized objective with brute-force oracles,
exact analytic gradients with a finite-difference checker, the
teacher-to-student training pipeline, and the student-versus-teacher
win-rate evaluation protocol.
"""

__version__ = "0.1.0"

from .corpus import (
    CorpusError,
    PreferenceTriplet,
    Prompt,
    Response,
    SftPair,
    Vocab,
    build_datasets,
    generate_synthetic_corpus,
    load_datasets,
    load_prompts,
    save_prompts,
    write_datasets,
)
from .policy import (
    DecodeConfig,
    ResponseSpace,
    TabularPolicy,
    TokenModelPolicy,
    enumerate_responses,
    load_policy,
    sample,
    save_policy,
    sentence_logprob,
    token_distribution,
)
from .losses import (
    BetaPair,
    LossBreakdown,
    composite_loss,
    dadpo_loss,
    ddpo_loss,
    rdpo_loss,
    sft_loss,
    token_kl_loss,
)
from .theory import (
    ExactDistribution,
    bt_preference,
    brute_force_maximize,
    exact_distribution,
    implicit_reward,
    implicit_reward_constant,
    optimal_policy,
    partition_z,
    rl_objective,
)
from .grads import (
    OptimConfig,
    dadpo_grad,
    finite_diff_grad,
    loss_grad,
    make_optimizer,
    step,
)
from .pipeline import (
    Distiller,
    PreferenceTrainer,
    RunConfig,
    RunManifest,
    SftTrainer,
    distill,
    run_dsft,
    run_preference_stage,
    sweep_preference,
)
from .evaluation import (
    EvalConfig,
    JudgeVerdict,
    LlmJudge,
    OracleJudge,
    WinRateReport,
    evaluate_model,
    llm_judge,
    oracle_judge,
    win_rate,
)
from .worlds import SyntheticWorld, echo_reward, make_world
