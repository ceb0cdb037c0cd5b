# pathkernel/__main__.py
from pathkernel.cli import main

main()
