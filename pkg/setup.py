"""
Environment verification script.
Run after creating the virtual environment to check the toolchain the pipeline needs.
"""
import os
import subprocess
import sys
from pathlib import Path


def check_python_version():
    """Ensure Python 3.10+ is being used"""
    version = sys.version_info
    if version.major < 3 or (version.major == 3 and version.minor < 10):
        print(f"❌ Python 3.10+ required, found {version.major}.{version.minor}")
        return False
    print(f"✓ Python version: {version.major}.{version.minor}.{version.micro}")
    return True


def check_venv():
    if sys.prefix == sys.base_prefix:
        print("❌ Virtual environment not activated")
        print("   Please run: source .venv/bin/activate")
        return False
    print(f"✓ Virtual environment: {sys.prefix}")
    return True


def install_requirements():
    print("\n📦 Installing dependencies...")
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✓ Dependencies installed")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Failed to install dependencies: {e}")
        return False


def verify_imports():
    """Verify the numerical and bookkeeping stack imports"""
    print("\n🔍 Verifying package installations...")
    packages = [
        ("torch", "PyTorch"),
        ("numpy", "NumPy"),
        ("scipy", "SciPy"),
        ("skimage", "scikit-image"),
        ("matplotlib", "Matplotlib"),
        ("tqdm", "tqdm"),
        ("sqlmodel", "SQLModel"),
        ("sqlalchemy", "SQLAlchemy"),
        ("pydantic", "Pydantic"),
        ("dotenv", "python-dotenv"),
        ("pytest", "pytest"),
    ]
    all_ok = True
    for module_name, display_name in packages:
        try:
            __import__(module_name)
            print(f"  ✓ {display_name}")
        except ImportError:
            print(f"  ❌ {display_name} - not installed")
            all_ok = False
    return all_ok


def check_device():
    import torch

    if torch.cuda.is_available():
        print(f"✓ CUDA device: {torch.cuda.get_device_name(0)}")
    else:
        print("⚠️  No CUDA device; training will run on CPU (fine for configs/toy.json)")
    return True


def check_output_root():
    """Ensure the output root is writable (artifacts and the SQLite registry live there)"""
    root = Path(os.getenv("SINOGUIDE_OUTPUT_ROOT", "./runs"))
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".test_write"
        probe.touch()
        probe.unlink()
        print(f"✓ Output root writable: {root}")
        return True
    except OSError as e:
        print(f"❌ Output root {root} not writable: {e}")
        return False


def print_next_steps():
    print("\n" + "=" * 60)
    print("🎉 Setup Complete!")
    print("=" * 60)
    print("\n📝 Next Steps:")
    print("\n1. Run the toy pipeline end to end:")
    print("   ./start_dev.sh")
    print("\n2. Or stage by stage:")
    print("   python main.py gen-data --config configs/toy.json")
    print("   python main.py train-prior --config configs/toy.json")
    print("   python main.py train-diffusion --config configs/toy.json")
    print("\n3. Run the tests:")
    print("   pytest            (SINOGUIDE_RUN_SLOW=1 pytest for training experiments)")
    print("\n📚 Documentation: QUICKSTART.md, DESIGN.md")
    print("\n" + "=" * 60)


def main():
    print("=" * 60)
    print("Sinogram-guided diffusion - Setup & Verification")
    print("=" * 60)
    print()

    checks = [
        ("Python version", check_python_version),
        ("Virtual environment", check_venv),
        ("Output root", check_output_root),
    ]
    all_passed = True
    for _, check_func in checks:
        if not check_func():
            all_passed = False
    if not all_passed:
        print("\n❌ Some checks failed. Please fix the issues above.")
        sys.exit(1)

    if not install_requirements():
        sys.exit(1)
    if not verify_imports():
        print("\n❌ Some packages failed to import")
        print("   Try: pip install -r requirements.txt")
        sys.exit(1)
    check_device()
    print_next_steps()


if __name__ == "__main__":
    main()
