"""Just enough ELF parsing to read DT_SONAME from a shared object.

Reads the section header table, locates the dynamic section and its
linked string table, and returns the soname string.  Returns None for
anything that is not an ELF shared object or carries no soname.
"""

import struct

_ELF_MAGIC = b"\x7fELF"
_SHT_DYNAMIC = 6
_DT_SONAME = 14


def read_soname(path) -> str | None:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError:
        return None
    if len(data) < 64 or data[:4] != _ELF_MAGIC:
        return None

    is64 = data[4] == 2
    endian = "<" if data[5] == 1 else ">"
    try:
        if is64:
            shoff, shentsize, shnum = struct.unpack_from(endian + "Q", data, 0x28)[0], \
                struct.unpack_from(endian + "H", data, 0x3A)[0], \
                struct.unpack_from(endian + "H", data, 0x3C)[0]
        else:
            shoff = struct.unpack_from(endian + "I", data, 0x20)[0]
            shentsize = struct.unpack_from(endian + "H", data, 0x2E)[0]
            shnum = struct.unpack_from(endian + "H", data, 0x30)[0]

        sections = []
        for i in range(shnum):
            off = shoff + i * shentsize
            if is64:
                sh_type, = struct.unpack_from(endian + "I", data, off + 4)
                sh_offset, sh_size = struct.unpack_from(endian + "QQ", data, off + 0x18)
                sh_link, = struct.unpack_from(endian + "I", data, off + 0x28)
                sh_entsize, = struct.unpack_from(endian + "Q", data, off + 0x38)
            else:
                sh_type, = struct.unpack_from(endian + "I", data, off + 4)
                sh_offset, sh_size = struct.unpack_from(endian + "II", data, off + 0x10)
                sh_link, = struct.unpack_from(endian + "I", data, off + 0x18)
                sh_entsize, = struct.unpack_from(endian + "I", data, off + 0x24)
            sections.append((sh_type, sh_offset, sh_size, sh_link, sh_entsize))

        for sh_type, sh_offset, sh_size, sh_link, sh_entsize in sections:
            if sh_type != _SHT_DYNAMIC:
                continue
            strtab_off, strtab_size = sections[sh_link][1], sections[sh_link][2]
            entsize = sh_entsize or (16 if is64 else 8)
            fmt = endian + ("qQ" if is64 else "iI")
            for off in range(sh_offset, sh_offset + sh_size, entsize):
                d_tag, d_val = struct.unpack_from(fmt, data, off)
                if d_tag == 0:
                    break
                if d_tag == _DT_SONAME:
                    start = strtab_off + d_val
                    end = data.index(b"\x00", start, strtab_off + strtab_size)
                    return data[start:end].decode("utf-8", errors="replace")
    except (struct.error, ValueError, IndexError):
        return None
    return None
