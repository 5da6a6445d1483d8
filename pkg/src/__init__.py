# CMP density toolkit
