#include "getmol/pdb.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

namespace getmol {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

/// 1-based inclusive column slice, padded with spaces past the line end.
std::string columns(const std::string& line, std::size_t from, std::size_t to) {
    std::string out;
    for (std::size_t c = from; c <= to; ++c) {
        out.push_back(c - 1 < line.size() ? line[c - 1] : ' ');
    }
    return out;
}

double parse_coord(const std::string& field, int line_no) {
    const std::string t = trim(field);
    if (t.empty()) throw PdbParseError(line_no, "empty coordinate field");
    double value = 0.0;
    const char* begin = t.data();
    const char* end = t.data() + t.size();
    const auto res = std::from_chars(begin, end, value);
    if (res.ec != std::errc() || res.ptr != end || !std::isfinite(value)) {
        throw PdbParseError(line_no, "malformed coordinate '" + t + "'");
    }
    return value;
}

std::string normalize_element(std::string sym) {
    sym = trim(sym);
    if (sym.empty()) return sym;
    sym[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sym[0])));
    for (std::size_t i = 1; i < sym.size(); ++i) {
        sym[i] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[i])));
    }
    return sym;
}

int element_from_fields(const std::string& element_field, const std::string& atom_name) {
    const std::string sym = normalize_element(element_field);
    if (!sym.empty()) {
        const int id = vocab::element_id(sym);
        if (vocab::element_name(id) == sym) return id;
    }
    // Fallback: derive from the atom name. Skip leading digits, then try a
    // two-letter symbol before the single-letter one.
    std::string name = trim(atom_name);
    std::size_t i = 0;
    while (i < name.size() && std::isdigit(static_cast<unsigned char>(name[i]))) ++i;
    if (i >= name.size()) return vocab::element_unk();
    if (i + 1 < name.size()) {
        const std::string two = normalize_element(name.substr(i, 2));
        const int id = vocab::element_id(two);
        if (vocab::element_name(id) == two && two != "Ca") {
            // "CA" in a residue is an alpha carbon, not calcium.
            return id;
        }
    }
    const std::string one = normalize_element(name.substr(i, 1));
    return vocab::element_id(one);
}

bool is_water(const std::string& res_name) { return res_name == "HOH" || res_name == "WAT"; }

}  // namespace

int position_code_for(const std::string& atom_name) {
    const std::string name = trim(atom_name);
    if (name == "N") return vocab::pos_code_id("bb_N");
    if (name == "CA") return vocab::pos_code_id("bb_CA");
    if (name == "C") return vocab::pos_code_id("bb_C");
    if (name == "O") return vocab::pos_code_id("bb_O");
    std::size_t i = 0;
    while (i < name.size() && std::isdigit(static_cast<unsigned char>(name[i]))) ++i;
    if (i + 1 >= name.size()) return vocab::pos_unk();
    switch (std::toupper(static_cast<unsigned char>(name[i + 1]))) {
        case 'A': return vocab::pos_code_id("alpha");
        case 'B': return vocab::pos_code_id("beta");
        case 'G': return vocab::pos_code_id("gamma");
        case 'D': return vocab::pos_code_id("delta");
        case 'E': return vocab::pos_code_id("epsilon");
        case 'Z': return vocab::pos_code_id("zeta");
        case 'H': return vocab::pos_code_id("eta");
        default: return vocab::pos_unk();
    }
}

std::size_t ParsedStructure::n_atoms() const {
    std::size_t n = hetero.size();
    for (const auto& c : chains)
        for (const auto& r : c.residues) n += r.atoms.size();
    return n;
}

ParsedStructure parse_pdb_subset(const std::string& text, const PdbParseOptions& opts) {
    ParsedStructure out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;

    PdbChain* chain = nullptr;
    PdbResidue* residue = nullptr;
    std::string cur_chain_id;
    int cur_seq = 0;
    char cur_icode = ' ';
    std::string cur_res_name;
    bool chain_open = false;

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string record = trim(columns(line, 1, 6));
        if (record == "END") break;
        if (record == "TER") {
            chain_open = false;
            continue;
        }
        if (record != "ATOM" && record != "HETATM") continue;

        const char altloc = columns(line, 17, 17)[0];
        if (altloc != ' ' && altloc != 'A') continue;

        const std::string res_name = trim(columns(line, 18, 20));
        if (!opts.keep_waters && is_water(res_name)) continue;

        PdbAtom atom;
        atom.name = trim(columns(line, 13, 16));
        atom.xyz[0] = parse_coord(columns(line, 31, 38), line_no);
        atom.xyz[1] = parse_coord(columns(line, 39, 46), line_no);
        atom.xyz[2] = parse_coord(columns(line, 47, 54), line_no);
        atom.element = element_from_fields(columns(line, 77, 78), atom.name);

        if (record == "HETATM") {
            atom.pos_code = vocab::pos_blank();
            out.hetero.push_back(std::move(atom));
            continue;
        }

        atom.pos_code = position_code_for(atom.name);
        const std::string chain_id = trim(columns(line, 22, 22));
        const int seq = [&] {
            const std::string s = trim(columns(line, 23, 26));
            int v = 0;
            if (!s.empty()) {
                const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
                if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
                    throw PdbParseError(line_no, "malformed residue number '" + s + "'");
                }
            }
            return v;
        }();
        const char icode = columns(line, 27, 27)[0];

        if (!chain_open || chain_id != cur_chain_id) {
            out.chains.push_back(PdbChain{chain_id, {}});
            chain = &out.chains.back();
            chain_open = true;
            cur_chain_id = chain_id;
            residue = nullptr;
        }
        if (!residue || seq != cur_seq || icode != cur_icode || res_name != cur_res_name) {
            chain->residues.push_back(PdbResidue{res_name, seq, icode, {}});
            residue = &chain->residues.back();
            cur_seq = seq;
            cur_icode = icode;
            cur_res_name = res_name;
        }
        residue->atoms.push_back(std::move(atom));
    }

    if (out.n_atoms() == 0) throw std::runtime_error("empty structure: no usable atom records");
    return out;
}

ComplexGraph assemble_complex(const std::vector<ParsedStructure>& structures,
                              const AssembleOptions& opts) {
    if (structures.empty()) throw ContractError("assemble_complex needs at least one structure");
    std::vector<Block> blocks;
    int next_mol = 0;
    for (const auto& s : structures) {
        int chain_mol = -1;
        for (const auto& c : s.chains) {
            if (opts.split_chains || chain_mol < 0) chain_mol = next_mol++;
            for (const auto& r : c.residues) {
                Block b;
                b.block_type = vocab::residue_block_id(r.name);
                b.molecule_id = chain_mol;
                for (const auto& a : r.atoms) {
                    b.atoms.push_back(Atom{a.element, a.pos_code, a.xyz});
                }
                if (!b.atoms.empty()) blocks.push_back(std::move(b));
            }
        }
        if (!s.hetero.empty()) {
            const int het_mol = next_mol++;
            for (const auto& a : s.hetero) {
                Block b;
                b.block_type = vocab::small_molecule_block_id(a.element);
                b.molecule_id = het_mol;
                b.atoms.push_back(Atom{a.element, vocab::pos_blank(), a.xyz});
                blocks.push_back(std::move(b));
            }
        }
    }
    if (blocks.empty()) throw std::runtime_error("empty structure: no blocks to assemble");
    ComplexGraph g = build_graph(std::move(blocks), opts.k);
    if (opts.interface_cutoff) g = extract_interface(g, *opts.interface_cutoff);
    return g;
}

}  // namespace getmol
