"""
Environment validation utilities for vqseg.
Validates dependencies, the run directory and the dataset layout before a run starts.
"""
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple


class ValidationError(Exception):
    """Raised when environment validation fails."""
    pass


class EnvironmentValidator:
    """Validates environment setup before training or evaluation."""

    @staticmethod
    def validate_run_directory(path: Path) -> Tuple[bool, str]:
        """
        Validate run directory is writable, creating it if missing.

        Args:
            path: Path to the run directory

        Returns:
            (is_valid: bool, message: str)
        """
        path = Path(path)

        if not path.exists():
            try:
                path.mkdir(parents=True, exist_ok=True)
                return True, f"✅ Created run directory: {path}"
            except PermissionError:
                return False, f"❌ Cannot create directory: {path} (permission denied)"
            except Exception as e:
                return False, f"❌ Cannot create directory: {path} ({str(e)})"

        if not os.access(path, os.W_OK):
            return False, f"❌ Run directory not writable: {path}"

        return True, f"✅ Run directory writable: {path}"

    @staticmethod
    def validate_dataset_root(root: Path, splits: List[str]) -> Tuple[bool, str]:
        """
        Check root/<split>/images and root/<split>/labels exist for every split.

        Returns:
            (is_valid: bool, message: str)
        """
        root = Path(root)
        if not root.is_dir():
            return False, f"❌ Dataset root not found: {root}"

        missing = [
            str(root / split / sub)
            for split in splits
            for sub in ("images", "labels")
            if not (root / split / sub).is_dir()
        ]
        if missing:
            return False, "❌ Dataset layout incomplete, missing:\n   " + "\n   ".join(missing)

        return True, f"✅ Dataset layout found under {root} ({', '.join(splits)})"

    @staticmethod
    def check_dependencies() -> Tuple[bool, str, List[str]]:
        """
        Check if required packages are installed.

        Returns:
            (all_installed: bool, message: str, missing: List[str])
        """
        required = {
            'numpy': 'numpy',
            'PIL': 'Pillow',
            'pydantic': 'pydantic',
            'yaml': 'pyyaml',
            'dotenv': 'python-dotenv',
        }

        missing = []
        for module, package in required.items():
            try:
                __import__(module)
            except ImportError:
                missing.append(package)

        if missing:
            return False, f"❌ Missing dependencies: {', '.join(missing)}", missing

        return True, "✅ All dependencies installed", []

    @staticmethod
    def run_full_validation(
        run_dir: Optional[Path] = None,
        dataset_root: Optional[Path] = None,
        splits: Optional[List[str]] = None,
    ) -> bool:
        """
        Run all validation checks.

        Args:
            run_dir: Optional run directory to validate
            dataset_root: Optional on-disk dataset root to validate
            splits: Splits expected under dataset_root

        Returns:
            True if all checks pass

        Raises:
            ValidationError if critical checks fail
        """
        print("\n" + "="*60)
        print("🔍 Pre-Flight Environment Validation")
        print("="*60 + "\n")

        # Check 1: Dependencies
        deps_ok, deps_msg, missing = EnvironmentValidator.check_dependencies()
        print(deps_msg)
        if not deps_ok:
            print(f"\n💡 Fix: pip install {' '.join(missing)}")
            raise ValidationError("Missing dependencies")

        # Check 2: Run directory (if provided)
        if run_dir:
            dir_ok, dir_msg = EnvironmentValidator.validate_run_directory(run_dir)
            print(f"\n{dir_msg}")
            if not dir_ok:
                raise ValidationError("Run directory not accessible")

        # Check 3: Dataset layout (folder datasets only)
        if dataset_root:
            data_ok, data_msg = EnvironmentValidator.validate_dataset_root(dataset_root, splits or ["train", "val"])
            print(f"\n{data_msg}")
            if not data_ok:
                raise ValidationError("Dataset not reachable")

        print("\n" + "="*60)
        print("✅ All checks passed - ready to proceed")
        print("="*60 + "\n")

        return True


def validate_or_exit(
    run_dir: Optional[Path] = None,
    dataset_root: Optional[Path] = None,
    splits: Optional[List[str]] = None,
):
    """
    Run validation and exit if it fails.

    Args:
        run_dir: Optional run directory to validate
        dataset_root: Optional dataset root to validate
        splits: Splits expected under dataset_root
    """
    try:
        EnvironmentValidator.run_full_validation(run_dir, dataset_root, splits)
    except ValidationError as e:
        print(f"\n❌ Validation failed: {e}")
        print("\n🛠️  Please fix the above issues and try again.")
        sys.exit(1)
    except Exception as e:
        print(f"\n❌ Unexpected error during validation: {e}")
        sys.exit(1)
