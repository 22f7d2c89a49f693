from hsnct.cli import entry

entry()
