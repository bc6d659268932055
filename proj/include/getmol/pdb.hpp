#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "getmol/graph.hpp"

namespace getmol {

struct PdbParseError : std::runtime_error {
    int line;
    PdbParseError(int line_no, const std::string& what)
        : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
};

struct PdbAtom {
    std::string name;  // trimmed atom name field
    int element = 0;
    int pos_code = 0;
    std::array<double, 3> xyz{0.0, 0.0, 0.0};
};

struct PdbResidue {
    std::string name;
    int seq = 0;
    char icode = ' ';
    std::vector<PdbAtom> atoms;
};

struct PdbChain {
    std::string id;
    std::vector<PdbResidue> residues;
};

struct ParsedStructure {
    std::vector<PdbChain> chains;
    std::vector<PdbAtom> hetero;  // one singleton block each, downstream

    std::size_t n_atoms() const;
};

struct PdbParseOptions {
    bool keep_waters = false;  // HOH/WAT records
};

/// Fixed-column subset parser: ATOM / HETATM / TER / END records only,
/// altloc 'A' or blank kept, element from columns 77-78 with an atom-name
/// fallback. Malformed coordinates raise PdbParseError with the line number;
/// zero atoms raise an "empty structure" error.
ParsedStructure parse_pdb_subset(const std::string& text, const PdbParseOptions& opts = {});

/// Backbone names map to the backbone codes; other names map through the
/// remoteness letter (A..H -> alpha..eta); anything else is UNK.
int position_code_for(const std::string& atom_name);

struct AssembleOptions {
    int k = 9;
    std::optional<double> interface_cutoff;
    bool split_chains = false;  // each chain its own molecule
};

/// Builds one graph from parsed structures. Each structure's chains form
/// one molecule (or one per chain with split_chains); its hetero atoms form
/// a further molecule of singleton blocks. Interface extraction runs when a
/// cutoff is set; kNN edges use the configured k.
ComplexGraph assemble_complex(const std::vector<ParsedStructure>& structures,
                              const AssembleOptions& opts = {});

}  // namespace getmol
