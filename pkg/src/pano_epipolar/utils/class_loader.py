import copy
import importlib
import inspect
import logging
import pkgutil
import re
from typing import Any, Dict

from pano_epipolar.core.errors import ConfigError

logger = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\$\{([^}]+)\}")


def discover_classes(package_root: str) -> Dict[str, type]:
    """Walk all modules under the given package root and map class name -> class type."""
    class_map = {}
    pkg = importlib.import_module(package_root)
    for finder, name, ispkg in pkgutil.walk_packages(pkg.__path__, pkg.__name__ + "."):
        if name.endswith(".main"):
            continue
        try:
            mod = importlib.import_module(name)
        except ImportError as e:
            logger.debug(f"Skipping {name}: {e}")
            continue
        for attr_name, obj in inspect.getmembers(mod, inspect.isclass):
            # only include classes defined in this module (avoid stdlib etc.)
            if obj.__module__ == mod.__name__:
                class_map[attr_name] = obj
    return class_map


def get_from_path(path: str, tree: dict) -> Any:
    node = tree
    for p in path.split('.'):
        try:
            node = node[p]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"placeholder ${{{path}}} does not resolve (missing '{p}')") from e
    return node


def resolve_interpolations(args: Any, config: dict) -> Any:
    """Resolve ${path.to.value} placeholders in args using the config tree.

    A placeholder that makes up the whole string keeps the referenced value's type;
    placeholders embedded in longer strings are substituted as text.
    """
    if isinstance(args, dict):
        return {k: resolve_interpolations(v, config) for k, v in args.items()}
    if isinstance(args, list):
        return [resolve_interpolations(v, config) for v in args]
    if isinstance(args, str):
        whole = PLACEHOLDER.fullmatch(args)
        if whole:
            return copy.deepcopy(get_from_path(whole.group(1), config))
        return PLACEHOLDER.sub(lambda m: str(get_from_path(m.group(1), config)), args)
    return args


def apply_overrides(config: dict, overrides: dict) -> dict:
    """Copy of config with dotted-path overrides set, skipping None values."""
    out = copy.deepcopy(config)
    for path, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = path.split('.')
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def initialize_from_config(config: dict, package_root: str = "pano_epipolar") -> dict:
    """
    Recursively traverse the config and replace every mapping containing
    a 'class' key with an instance of that class, initialized from its 'args'.

    Returns a **copy of config** with the instantiated classes attached
    in the same nested structure.

    Example:
        config['mask_builder'] = EpipolarMaskBuilder(k=250, ...)
    """
    class_map = discover_classes(package_root)

    def _build(node: Any, parent_path: str = "") -> Any:
        # Recursively handle dicts and lists
        if isinstance(node, dict):
            if "class" in node:
                class_name = node["class"]
                args = resolve_interpolations(node.get("args") or {}, config)

                if class_name not in class_map:
                    raise ConfigError(f"Class '{class_name}' at {parent_path or '<root>'} "
                                      f"not found under package '{package_root}'")

                cls = class_map[class_name]
                try:
                    inst = cls(**args)
                    logger.debug(f"Instantiated {class_name} at {parent_path or '<root>'} with args={args}")
                    return inst
                except (TypeError, ValueError) as e:
                    raise ConfigError(
                        f"Failed to instantiate {class_name} at {parent_path or '<root>'}: {e}"
                    ) from e
            else:
                # Recurse into dict
                return {k: _build(v, f"{parent_path}.{k}" if parent_path else k) for k, v in node.items()}
        elif isinstance(node, list):
            return [_build(v, f"{parent_path}[]") for v in node]
        else:
            return node

    return _build(copy.deepcopy(config))
