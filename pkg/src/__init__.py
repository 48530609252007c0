"""
l2d-toy - a frozen autoregressive language model with a parallel diffusion path.

The diffusion path refines each next-token prediction over a configurable
number of solver steps, trading test-time compute for accuracy, while the
frozen main path runs once per token. The package also ships synthetic tasks,
training loops and the experiment harness used to study that trade-off.
"""

__version__ = "0.1.0"
__author__ = "l2d-toy developers"
__email__ = "contact@example.com"
__license__ = "MIT"

# Version information for programmatic access
VERSION_INFO = {
    "major": 0,
    "minor": 1,
    "patch": 0,
    "pre_release": None,  # alpha, beta, rc
    "build": None
}


def get_version() -> str:
    """Get the current version string."""
    version = f"{VERSION_INFO['major']}.{VERSION_INFO['minor']}.{VERSION_INFO['patch']}"

    if VERSION_INFO['pre_release']:
        version += f"-{VERSION_INFO['pre_release']}"

    if VERSION_INFO['build']:
        version += f"+{VERSION_INFO['build']}"

    return version


# Verify version consistency
assert __version__ == get_version(), "Version mismatch between __version__ and VERSION_INFO"

# Package metadata
PACKAGE_INFO = {
    "name": "l2d-toy",
    "version": __version__,
    "description": "Desk-scale diffusion path on a frozen autoregressive language model",
    "author": __author__,
    "author_email": __email__,
    "license": __license__,
    "keywords": ["diffusion", "language-model", "rectified-flow", "lora", "ode-solvers"],
    "python_requires": ">=3.8"
}

__all__ = ["__version__", "VERSION_INFO", "PACKAGE_INFO", "get_version"]
