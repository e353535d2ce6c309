from .baselines import FoolsGold, MultiKrum, NormClipping, foolsgold_weights, multi_krum
from .trojandam import (FloodDataset, KeyKernelMask, ShadowDataset, TrojanDam, TrojanDamConfig, build_flood,
                        build_shadow, identify_key_kernels, inject_ood_mappings, refresh_flood)

__all__ = ["FoolsGold", "MultiKrum", "NormClipping", "foolsgold_weights", "multi_krum", "FloodDataset",
           "KeyKernelMask", "ShadowDataset", "TrojanDam", "TrojanDamConfig", "build_flood", "build_shadow",
           "identify_key_kernels", "inject_ood_mappings", "refresh_flood"]
