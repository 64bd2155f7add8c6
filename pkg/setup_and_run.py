#!/usr/bin/env python3
"""
Setup and run script for the DisCoPatch OOD detector
Creates a virtual environment, installs dependencies, and runs a demo pipeline
(synthetic data -> corruption grid -> training -> evaluation)
"""

import subprocess
import sys
import platform
import venv
from pathlib import Path

DEMO_DIR = Path("demo")


def get_python_command():
    """Get the appropriate Python command based on the platform."""
    if platform.system() == "Windows":
        return "python"
    else:
        return "python3"


def run_command(command, description, check=True, show_output=False):
    """Run a command and handle errors."""
    print(f"🔄 {description}...")
    try:
        result = subprocess.run(command, shell=True, check=check, capture_output=not show_output, text=True)
        if not show_output and result.stdout:
            print(result.stdout)
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Error: {e}")
        if e.stderr:
            print(f"Error details: {e.stderr}")
        return False


def create_virtual_environment():
    """Create a virtual environment."""
    venv_path = Path("venv")

    if venv_path.exists():
        print("📁 Virtual environment already exists")
        return True

    print("📁 Creating virtual environment...")
    try:
        venv.create(venv_path, with_pip=True)
        print("✅ Virtual environment created successfully!")
        return True
    except Exception as e:
        print(f"❌ Failed to create virtual environment: {e}")
        return False


def get_venv_python_path():
    """Get the path to Python in the virtual environment."""
    if platform.system() == "Windows":
        return Path("venv/Scripts/python.exe")
    else:
        return Path("venv/bin/python")


def install_requirements():
    """Install requirements in the virtual environment."""
    python_path = get_venv_python_path()

    if not python_path.exists():
        print(f"❌ Python not found at {python_path}")
        return False

    if not run_command(f'"{python_path}" -m pip install --upgrade pip', "Upgrading pip"):
        return False

    if not run_command(f'"{python_path}" -m pip install -r requirements.txt', "Installing requirements"):
        return False

    return True


def demo_steps(python_path, preset, n_images, epochs, image_size):
    """Command lines of the demo pipeline."""
    cli = f'"{python_path}" discopatch.py --log-file {DEMO_DIR / "discopatch.log"}'
    clean, test = DEMO_DIR / "clean", DEMO_DIR / "test"
    corrupt, run = DEMO_DIR / "corrupt", DEMO_DIR / preset
    return [
        (f"{cli} synth --out {clean} --n {n_images} --seed 0", "Generating synthetic training images"),
        (f"{cli} synth --out {test} --n {max(20, n_images // 10)} --seed 1", "Generating held-out test images"),
        (f"{cli} corrupt --in {test} --out {corrupt} --kinds gaussian_noise,gaussian_blur "
         f"--severities 1-5 --size {image_size}", "Building the corruption grid"),
        (f"{cli} train --preset {preset} --data {clean} --out {run} --epochs {epochs}", "Training"),
        (f"{cli} eval --ckpt {run / 'model.dcpk'} --id {test} --grid {corrupt} --csv {run / 'eval.csv'}",
         "Evaluating ID vs corrupted images"),
    ]


def run_demo():
    """Run the demo pipeline."""
    python_path = get_venv_python_path()

    if not python_path.exists():
        print(f"❌ Python not found at {python_path}")
        return False

    print("\n🎯 Choose which demo to run:")
    print("1. Smoke test (micro model, 64 images, 1 epoch) - about a minute")
    print("2. Desk-scale patch model (2000 images, 30 epochs) - long CPU run")

    choice = input("\nEnter your choice (1 or 2): ").strip()

    if choice == "2":
        steps = demo_steps(python_path, "desk", 2000, 30, 256)
        print("🎯 Running desk-scale pipeline...")
    else:
        steps = demo_steps(python_path, "micro", 64, 1, 16)
        print("🎯 Running smoke test...")

    DEMO_DIR.mkdir(exist_ok=True)
    print("🛑 Press Ctrl+C to stop")
    print("=" * 50)

    try:
        for command, description in steps:
            if not run_command(command, description, show_output=True):
                return False
    except KeyboardInterrupt:
        print("\n👋 Demo stopped by user")
        return False

    print(f"\n📊 Results saved to: {DEMO_DIR}")
    return True


def main():
    print("🚀 DisCoPatch OOD Detector Setup")
    print("=" * 50)

    python_cmd = get_python_command()
    if not run_command(f"{python_cmd} --version", "Checking Python installation", check=False):
        print("❌ Python is not installed or not in PATH")
        return

    if not create_virtual_environment():
        return

    if not install_requirements():
        print("❌ Failed to install requirements")
        return

    print("✅ Setup completed successfully!")

    if not run_demo():
        sys.exit(1)


if __name__ == "__main__":
    main()
