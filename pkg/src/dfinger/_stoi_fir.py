# Generated once; do not regenerate.  Prototype low-pass for 24 kHz -> 10 kHz
# polyphase resampling (up 5, down 12): 320 taps at 120 kHz, i.e. 64 per phase,
# 4.8 kHz cutoff, Kaiser beta 6, gain 5 to undo zero-stuffing.

STOI_DECIMATION_FIR = (
    0.0001015847954366018, 0.00014067484304879744, 0.00017682608975134908, 0.0002059716779147102,
    0.00022397139414930976, 0.00022698467005000933, 0.00021186718300540884, 0.00017655857113590276,
    0.000120425941025088, 4.452777489964834e-05, -4.823419500821716e-05, -0.00015310154564715864,
    -0.00026360167224616333, -0.00037185250237012525, -0.00046902274797272703, -0.0005459273633684322,
    -0.000593724528915008, -0.0006046685766436824, -0.0005728639236703262, -0.0004949592797651635,
    -0.0003707199439627408, -0.00020341941691699863, 4.255140975359991e-18, 0.00022903469000630175,
    0.00047001491149250066, 0.0007067866786259456, 0.0009216568382689925, 0.0010965551302267642,
    0.0012143458120519423, 0.001260203519248721, 0.0012229550894282811, 0.0010962825296361536,
    0.0008796831969771086, 0.0005790921533126243, 0.0002070885362121682, -0.00021736795992594707,
    -0.0006696940076731531, -0.0011209217542961169, -0.0015393720746139175, -0.0018926776268930602,
    -0.0021500383386496343, -0.002284564914010634, -0.002275547397245149, -0.002110477785926836,
    -0.0017866595706780193, -0.0013122535162284632, -0.0007066377387606236, 3.2653964089282342e-18,
    0.000767870951578611, 0.0015495731020708221, 0.0022927784072803744, 0.002943483730322904,
    0.0034496389780798915, 0.003764924874032364, 0.0038524250277032893, 0.0036879254057388434,
    0.0032625809493367396, 0.0025847147156614005, 0.001680559036281669, 0.0005938089148651008,
    -0.0006160679510360024, -0.0018767368920304063, -0.003107003049761664, -0.004221719578645288,
    -0.005137320886961939, -0.005777641964180168, -0.006079641754376221, -0.005998629223289685,
    -0.005512598116127949, -0.004625311612341665, -0.00336784047380652, -0.001798345234537259,
    6.4108443085750794e-18, 0.0019229236515508484, 0.0038506668472816, 0.005655016529084509,
    0.007207375772329498, 0.0083873903133661, 0.009091582010146267, 0.009241404992232565,
    0.008790142976373967, 0.007728108681881476, 0.00608568792428524, 0.003933888535783981,
    0.0013822018618651864, -0.0014262460557547684, -0.0043220955912418625, -0.007119368030347859,
    -0.00962678586279081, -0.011660146873364223, -0.013054990956518292, -0.013678734128414052,
    -0.013441431183847823, -0.012304370558834045, -0.010285802439167022, -0.0074632505438194975,
    -0.0039720522131806105, 1.0082807330979023e-17, 0.00422179237244045, 0.008431421404129504,
    0.012351499633520576, 0.01570639570851115, 0.01824039441606569, 0.019735644995681235,
    0.020028716056415652, 0.019024599530724162, 0.01670710658322847, 0.01314477265025418,
    0.008491629311966589, 0.0029824953448741197, -0.0030772281481870663, -0.009326922601361228,
    -0.01537059291496186, -0.020800177881975527, -0.025221047993836194, -0.028278199781876196,
    -0.029681530336549473, -0.029228545203767924, -0.02682292388015475, -0.02248753991547104,
    -0.016370801119425765, -0.0087455272670611, 1.3376261304731773e-17, 0.009378720475186895,
    0.01882864115573313, 0.02774280980808632, 0.03550395872914671, 0.04152200658899809,
    0.04527234442644695, 0.04633268230499089, 0.044416209285755806, 0.03939892758270828,
    0.03133926064836344, 0.02048839521495855, 0.007290282129174708, -0.007629233477216269,
    -0.02348408475077989, -0.03935977458750431, -0.05425400304317354, -0.06712430062780071,
    -0.07694037563188749, -0.08273853626627445, -0.08367533868275108, -0.07907755566784107,
    -0.0684856652263259, -0.05168832151451427, -0.028745681552158522, 1.5330897819246908e-17,
    0.03392745654181053, 0.07215341862707463, 0.11356305550966758, 0.15685263661782814,
    0.20058253152161493, 0.24323808871303454, 0.28329547928071974, 0.31928928804927986,
    0.34987850045226226, 0.3739075774286965, 0.3904595321155819, 0.39889831019864963,
    0.39889831019864963, 0.3904595321155819, 0.3739075774286965, 0.34987850045226226,
    0.31928928804927986, 0.28329547928071974, 0.24323808871303454, 0.20058253152161493,
    0.15685263661782814, 0.11356305550966758, 0.07215341862707463, 0.03392745654181053,
    1.5330897819246908e-17, -0.028745681552158522, -0.05168832151451427, -0.0684856652263259,
    -0.07907755566784107, -0.08367533868275108, -0.08273853626627445, -0.07694037563188749,
    -0.06712430062780071, -0.05425400304317354, -0.03935977458750431, -0.02348408475077989,
    -0.007629233477216269, 0.007290282129174708, 0.02048839521495855, 0.03133926064836344,
    0.03939892758270828, 0.044416209285755806, 0.04633268230499089, 0.04527234442644695,
    0.04152200658899809, 0.03550395872914671, 0.02774280980808632, 0.01882864115573313,
    0.009378720475186895, 1.3376261304731773e-17, -0.0087455272670611, -0.016370801119425765,
    -0.02248753991547104, -0.02682292388015475, -0.029228545203767924, -0.029681530336549473,
    -0.028278199781876196, -0.025221047993836194, -0.020800177881975527, -0.01537059291496186,
    -0.009326922601361228, -0.0030772281481870663, 0.0029824953448741197, 0.008491629311966589,
    0.01314477265025418, 0.01670710658322847, 0.019024599530724162, 0.020028716056415652,
    0.019735644995681235, 0.01824039441606569, 0.01570639570851115, 0.012351499633520576,
    0.008431421404129504, 0.00422179237244045, 1.0082807330979023e-17, -0.0039720522131806105,
    -0.0074632505438194975, -0.010285802439167022, -0.012304370558834045, -0.013441431183847823,
    -0.013678734128414052, -0.013054990956518292, -0.011660146873364223, -0.00962678586279081,
    -0.007119368030347859, -0.0043220955912418625, -0.0014262460557547684, 0.0013822018618651864,
    0.003933888535783981, 0.00608568792428524, 0.007728108681881476, 0.008790142976373967,
    0.009241404992232565, 0.009091582010146267, 0.0083873903133661, 0.007207375772329498,
    0.005655016529084509, 0.0038506668472816, 0.0019229236515508484, 6.4108443085750794e-18,
    -0.001798345234537259, -0.00336784047380652, -0.004625311612341665, -0.005512598116127949,
    -0.005998629223289685, -0.006079641754376221, -0.005777641964180168, -0.005137320886961939,
    -0.004221719578645288, -0.003107003049761664, -0.0018767368920304063, -0.0006160679510360024,
    0.0005938089148651008, 0.001680559036281669, 0.0025847147156614005, 0.0032625809493367396,
    0.0036879254057388434, 0.0038524250277032893, 0.003764924874032364, 0.0034496389780798915,
    0.002943483730322904, 0.0022927784072803744, 0.0015495731020708221, 0.000767870951578611,
    3.2653964089282342e-18, -0.0007066377387606236, -0.0013122535162284632, -0.0017866595706780193,
    -0.002110477785926836, -0.002275547397245149, -0.002284564914010634, -0.0021500383386496343,
    -0.0018926776268930602, -0.0015393720746139175, -0.0011209217542961169, -0.0006696940076731531,
    -0.00021736795992594707, 0.0002070885362121682, 0.0005790921533126243, 0.0008796831969771086,
    0.0010962825296361536, 0.0012229550894282811, 0.001260203519248721, 0.0012143458120519423,
    0.0010965551302267642, 0.0009216568382689925, 0.0007067866786259456, 0.00047001491149250066,
    0.00022903469000630175, 4.255140975359991e-18, -0.00020341941691699863, -0.0003707199439627408,
    -0.0004949592797651635, -0.0005728639236703262, -0.0006046685766436824, -0.000593724528915008,
    -0.0005459273633684322, -0.00046902274797272703, -0.00037185250237012525, -0.00026360167224616333,
    -0.00015310154564715864, -4.823419500821716e-05, 4.452777489964834e-05, 0.000120425941025088,
    0.00017655857113590276, 0.00021186718300540884, 0.00022698467005000933, 0.00022397139414930976,
    0.0002059716779147102, 0.00017682608975134908, 0.00014067484304879744, 0.0001015847954366018,
)
