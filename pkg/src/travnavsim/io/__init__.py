from .artifacts import (
    read_map as read_map,
    read_pgm as read_pgm,
    save_json as save_json,
    save_table as save_table,
    sha256_file as sha256_file,
    write_map as write_map,
    write_pgm as write_pgm,
)
