"""Split a transformer's FFNs into routed experts without changing its output, then train the routers."""
from .factorize import ExpertBank, PermutationMap, build_permutation, merge_experts, split_ffn, verify_equivalence
from .model import ModelConfig, ModelWeights, init_model, lm_forward
from .moe import MoeConfig, moe_ffn_forward, router_forward, topk_select
from .student import Student, build_student, student_logits
from .train import TrainConfig, run_training

__all__ = [
    "ExpertBank", "PermutationMap", "build_permutation", "merge_experts", "split_ffn", "verify_equivalence",
    "ModelConfig", "ModelWeights", "init_model", "lm_forward",
    "MoeConfig", "moe_ffn_forward", "router_forward", "topk_select",
    "Student", "build_student", "student_logits",
    "TrainConfig", "run_training",
]
