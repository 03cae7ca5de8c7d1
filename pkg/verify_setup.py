#!/usr/bin/env python3
"""
Verification script to check the GaLore+ experiments are ready to run
"""

import os
import sys
import tempfile
from pathlib import Path

def check_python_version():
    """Check Python version >= 3.9"""
    print("✓ Checking Python version...")
    version = sys.version_info
    if version.major < 3 or (version.major == 3 and version.minor < 9):
        print(f"  ✗ Python 3.9+ required, found {version.major}.{version.minor}")
        return False
    print(f"  ✓ Python {version.major}.{version.minor}.{version.micro}")
    return True

def check_project_structure():
    """Check if all required folders and modules exist"""
    print("\n✓ Checking project structure...")
    required_dirs = ['src', 'config', 'tests']
    required_files = [
        'requirements.txt',
        '.env.example',
        'config/default.yaml',
        'config/smoke.yaml',
        'src/__init__.py',
        'src/matrix_core.py',
        'src/svd.py',
        'src/projection.py',
        'src/lowrank_adamw.py',
        'src/sparse_residual.py',
        'src/toy_attention.py',
        'src/harness.py',
        'src/cli.py',
    ]

    all_good = True
    for dir_name in required_dirs:
        if not Path(dir_name).is_dir():
            print(f"  ✗ Missing directory: {dir_name}")
            all_good = False
        else:
            print(f"  ✓ {dir_name}/")

    for file_name in required_files:
        if not Path(file_name).is_file():
            print(f"  ✗ Missing file: {file_name}")
            all_good = False
        else:
            print(f"  ✓ {file_name}")

    return all_good

def check_dependencies():
    """Check if required Python packages are installed"""
    print("\n✓ Checking Python dependencies...")
    # package name -> import name
    required_packages = {
        'numpy': 'numpy',
        'pyyaml': 'yaml',
        'python-dotenv': 'dotenv',
        'matplotlib': 'matplotlib',
        'rich': 'rich',
    }

    all_good = True
    for package, module in required_packages.items():
        try:
            __import__(module)
            print(f"  ✓ {package}")
        except ImportError:
            print(f"  ✗ {package} not installed")
            all_good = False

    return all_good

def check_env_file():
    """Check the optional .env settings"""
    print("\n✓ Checking environment configuration...")

    if not Path('.env').is_file():
        print("  ⚠️  .env file not found (defaults apply; use .env.example as template)")
        return True

    from dotenv import dotenv_values

    values = dotenv_values('.env')
    level = values.get('GALORE_LOG_LEVEL')
    if level and level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
        print(f"  ✗ GALORE_LOG_LEVEL has an unknown level: {level}")
        return False
    for var in ('GALORE_LOG_LEVEL', 'GALORE_OUTPUT_DIR'):
        print(f"  ✓ {var} = {values.get(var) or '(default)'}")
    return True

def check_configs():
    """Check that the shipped configurations parse"""
    print("\n✓ Checking run configurations...")
    from src.config import parse_config
    from src.errors import ConfigError

    all_good = True
    for path in sorted(Path('config').glob('*.yaml')):
        try:
            config = parse_config(path)
            print(f"  ✓ {path} ({config.method.value}, {config.steps} steps)")
        except ConfigError as e:
            print(f"  ✗ {path}: {e}")
            all_good = False
    return all_good

def check_smoke_run():
    """Run a few optimizer steps of the smoke configuration"""
    print("\n✓ Running a short smoke run...")
    from src.config import parse_config
    from src.harness import run

    with tempfile.TemporaryDirectory() as tmp:
        config = parse_config(Path('config/smoke.yaml'), {'steps': 3, 'output_dir': tmp})
        result = run(config, write=False)
    print(f"  ✓ {config.method.value}: loss {result.summary['initial_loss']:.4g} -> {result.summary['final_loss']:.4g}")
    return True

def main():
    """Run all checks"""
    os.chdir(Path(__file__).resolve().parent)
    sys.path.insert(0, str(Path.cwd()))

    print("=" * 60)
    print("GaLore+ Experiments - Verification")
    print("=" * 60)

    checks = [
        ("Python Version", check_python_version),
        ("Project Structure", check_project_structure),
        ("Python Dependencies", check_dependencies),
        ("Environment Configuration", check_env_file),
        ("Run Configurations", check_configs),
        ("Smoke Run", check_smoke_run),
    ]

    results = []
    for name, check_func in checks:
        try:
            result = check_func()
            results.append((name, result))
        except Exception as e:
            print(f"\n✗ Error checking {name}: {e}")
            results.append((name, False))

    print("\n" + "=" * 60)
    print("Summary:")
    print("=" * 60)

    all_passed = True
    for name, result in results:
        status = "✓ PASS" if result else "✗ FAIL"
        print(f"{status:10} {name}")
        if not result:
            all_passed = False

    print("=" * 60)

    if all_passed:
        print("\n✓ All checks passed! Ready to run experiments.")
        print("\nNext steps:")
        print("  1. Run: python tests/run_tests.py")
        print("  2. Run: python -m src.cli run --config config/smoke.yaml")
        print("  3. Run: python -m src.cli compare --sweep method=galore-exact,galore-plus")
        return 0
    else:
        print("\n⚠️  Some checks failed. Please fix the issues above.")
        return 1

if __name__ == "__main__":
    sys.exit(main())
