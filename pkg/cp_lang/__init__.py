"""Channel-program assembler, disassembler and static safety checks."""
