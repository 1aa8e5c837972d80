"""
Generation Profiles Configuration
Defines the editing profiles (fast / medium / accurate) and their step budgets
"""
from typing import Any, Dict, Optional

from editctl import EditConfig

# ============================================
# EDIT PROFILES
# ============================================
# steps_logits counts gradient steps per generation iteration; codebook
# editing runs once after the last iteration.

EDIT_PROFILES = {
    'fast': {
        'name': 'Fast (codebook editing only)',
        'lr_logits': 0.06,
        'steps_logits': 0,            # no logit editing
        'lr_code': 0.06,
        'steps_code': 100,
        'description': '100 codebook steps after decoding, no logit editing',
    },

    'medium': {
        'name': 'Medium (long codebook editing)',
        'lr_logits': 0.06,
        'steps_logits': 0,
        'lr_code': 0.06,
        'steps_code': 600,
        'description': '600 codebook steps after decoding, no logit editing',
    },

    'accurate': {
        'name': 'Accurate (logit + codebook editing)',
        'lr_logits': 0.06,
        'steps_logits': 60,           # per iteration, 600 over 10 iterations
        'lr_code': 0.06,
        'steps_code': 600,
        'description': 'Logit editing inside every iteration plus 600 codebook steps',
    },
}

DEFAULT_PROFILE = 'fast'


def available_profiles():
    """Get profile names"""
    return list(EDIT_PROFILES.keys())


def get_profile(name: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Get profile settings, with per-run overrides from the run config"""
    if name not in EDIT_PROFILES and not (overrides and name in overrides):
        raise KeyError(f"unknown profile '{name}' (valid: {', '.join(available_profiles())})")
    profile = dict(EDIT_PROFILES.get(name, {}))
    if overrides and name in overrides:
        profile.update(overrides[name])
    return profile


def edit_config_for(name: str, temperature: float = 1.0, obstacle_weight: float = 1.0,
                    overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> EditConfig:
    """Build an EditConfig from a profile"""
    profile = get_profile(name, overrides)
    return EditConfig(
        lr_logits=float(profile['lr_logits']),
        steps_logits=int(profile['steps_logits']),
        lr_code=float(profile['lr_code']),
        steps_code=int(profile['steps_code']),
        temperature=temperature,
        obstacle_weight=obstacle_weight,
    )


def total_logit_steps(name: str, iterations: int, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> int:
    """Logit editing steps over a whole generation"""
    return int(get_profile(name, overrides)['steps_logits']) * iterations
